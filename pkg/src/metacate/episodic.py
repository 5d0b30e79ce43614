"""Episode sampling, meta-objectives, the meta-training loop and PEHE evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TaskData
from .errors import EvaluationError, MetaCateError, SamplingError, ShapeError
from .evaluation import PeheSummary, pehe
from .metalearner import (DEFAULT_PI_CLIP, LearnerKind, adapt, dr_pseudo_tensor,
                          predict_cate, predict_components, ra_pseudo_tensor,
                          support_encodings)
from .nn import AdamState, SharedParams, adam_step, init_shared
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)


@dataclass
class SupportSet:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray


@dataclass
class QuerySet:
    x: np.ndarray
    pseudo_cate: np.ndarray | None
    y: np.ndarray
    a: np.ndarray


@dataclass
class Episode:
    task_id: str
    support: SupportSet
    query: QuerySet
    support_rows: np.ndarray
    query_rows: np.ndarray

    @property
    def support_counts(self) -> tuple[int, int]:
        n1 = int(self.support.a.sum())
        return self.support.a.size - n1, n1

    @property
    def query_counts(self) -> tuple[int, int]:
        n1 = int(self.query.a.sum())
        return self.query.a.size - n1, n1


def _per_arm(n) -> tuple[int, int]:
    return (int(n), int(n)) if np.isscalar(n) else (int(n[0]), int(n[1]))


def sample_support_rows(task: TaskData, n_s, rng: np.random.Generator) -> np.ndarray:
    rows = []
    for arm, k in enumerate(_per_arm(n_s)):
        pool = np.flatnonzero(task.a == arm)
        if pool.size < k:
            raise SamplingError(f"{task.task_id}: arm {arm} has {pool.size} rows, support needs {k}")
        rows.append(rng.choice(pool, size=k, replace=False))
    return np.concatenate(rows)


def sample_episode(task: TaskData, n_s, n_q, rng: np.random.Generator) -> Episode:
    """Stratified support and query draws without replacement; query avoids the support rows."""
    ns, nq = _per_arm(n_s), _per_arm(n_q)
    s_rows, q_rows = [], []
    for arm in (0, 1):
        pool = np.flatnonzero(task.a == arm)
        need = ns[arm] + nq[arm]
        if pool.size < need:
            raise SamplingError(f"{task.task_id}: arm {arm} has {pool.size} rows, episode needs {need}")
        picked = rng.choice(pool, size=need, replace=False)
        s_rows.append(picked[:ns[arm]])
        q_rows.append(picked[ns[arm]:])
    s = np.concatenate(s_rows)
    q = np.concatenate(q_rows)
    pseudo = None if task.pseudo_cate is None else task.pseudo_cate[q]
    return Episode(task.task_id, SupportSet(task.x[s], task.y[s], task.a[s]),
                   QuerySet(task.x[q], pseudo, task.y[q], task.a[q]), s, q)


def cate_loss(tau_hat, pseudo_cate) -> Tensor:
    """Sum of squared differences (not the mean)."""
    tau_hat = ad.as_tensor(tau_hat)
    target = ad.as_tensor(pseudo_cate)
    if tau_hat.shape != target.shape:
        raise ShapeError(f"cate_loss: {tau_hat.shape} vs {target.shape}")
    return ad.sum(ad.square(ad.sub(target, tau_hat)))


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    return ad.scale(ad.sum(ad.square(ad.sub(pred, ad.constant(target.reshape(-1, 1))))), 1.0 / target.size)


def _subproblem_terms(kind: LearnerKind, adaptation, episode: Episode, shared, enc_q, pi_clip) -> Tensor:
    q = episode.query
    a = q.a.astype(np.float64).reshape(-1, 1)
    comps = predict_components(adaptation, q.x, shared, enc_q, pi_clip)
    terms = []
    if kind is LearnerKind.DR:
        # NLL of the treatments: -log pi for treated, -log(1 - pi) for untreated
        nll = ad.add(ad.mul(ad.constant(a), ad.neg(ad.log(comps["pi"]))),
                     ad.mul(ad.constant(1.0 - a), ad.neg(ad.log(ad.shift(ad.neg(comps["pi"]), 1.0)))))
        terms.append(ad.scale(ad.sum(nll), 1.0 / q.a.size))
    for arm in (0, 1):
        rows = np.flatnonzero(q.a == arm)
        if rows.size:
            terms.append(_mse(ad.take_rows(comps[f"mu{arm}"], rows), q.y[rows]))
    if kind is not LearnerKind.PLUGIN:
        if kind is LearnerKind.DR:
            target = dr_pseudo_tensor(q.y, q.a, comps["pi"], comps["mu0"], comps["mu1"])
        else:
            target = ra_pseudo_tensor(q.y, q.a, comps["mu0"], comps["mu1"])
        tau_q = predict_cate(kind, adaptation, q.x, shared, enc_q)
        terms.append(ad.scale(ad.sum(ad.square(ad.sub(tau_q, target))), 1.0 / q.a.size))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def episode_loss(episode: Episode, shared: SharedParams, learner="dr", head_mode: str | None = None,
                 objective: str = "cate", pi_clip: float = DEFAULT_PI_CLIP,
                 enc_s: dict | None = None, enc_q: dict | None = None) -> Tensor:
    """Adapt on the support set and score on the query set.

    ``objective="cate"`` is the squared error against pseudo-CATE labels;
    ``"subproblem"`` scores the sub-models on observed query data instead.
    """
    kind = LearnerKind(learner)
    adaptation = adapt(kind, episode.support, shared, head_mode, pi_clip, enc_s)
    if objective == "subproblem":
        return _subproblem_terms(kind, adaptation, episode, shared, enc_q, pi_clip)
    if objective != "cate":
        raise ValueError(f"unknown objective {objective!r}")
    if episode.query.pseudo_cate is None:
        raise MetaCateError(f"{episode.task_id}: query has no pseudo-CATE labels")
    tau = predict_cate(kind, adaptation, episode.query.x, shared, enc_q)
    return cate_loss(tau, episode.query.pseudo_cate.reshape(-1, 1))


def subproblem_loss(episode: Episode, shared: SharedParams, learner="dr", head_mode: str | None = None,
                    pi_clip: float = DEFAULT_PI_CLIP) -> Tensor:
    return episode_loss(episode, shared, learner, head_mode, "subproblem", pi_clip)


def batch_loss(episodes: list, shared: SharedParams, learner="dr", head_mode: str | None = None,
               objective: str = "cate", pi_clip: float = DEFAULT_PI_CLIP) -> Tensor:
    """Mean of per-episode losses; every encoder runs once over the stacked batch rows."""
    kind = LearnerKind(learner)
    blocks = []
    for ep in episodes:
        blocks += [ep.support.x, ep.query.x]
    enc_all = support_encodings(shared, np.vstack(blocks), kind)
    total, offset = None, 0
    for ep in episodes:
        ns, nq = ep.support.a.size, ep.query.a.size
        s_idx = np.arange(offset, offset + ns)
        q_idx = np.arange(offset + ns, offset + ns + nq)
        offset += ns + nq
        enc_s = {k: ad.take_rows(v, s_idx) for k, v in enc_all.items()}
        enc_q = {k: ad.take_rows(v, q_idx) for k, v in enc_all.items()}
        loss = episode_loss(ep, shared, kind, head_mode, objective, pi_clip, enc_s, enc_q)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(episodes))


@dataclass
class TrainConfig:
    learner: str = "dr"
    head_mode: str = "linear"
    n_support: int = 3  # per arm
    n_query: int = 20  # per arm
    batch_size: int = 32
    max_epochs: int = 5000
    val_interval: int = 10
    patience: int = 50  # in validations
    n_val_episodes: int = 4  # per validation task
    seed: int = 0
    objective: str = "cate"
    pi_clip: float = DEFAULT_PI_CLIP
    lr: float = 1e-3

    def __post_init__(self):
        LearnerKind(self.learner)
        if self.head_mode not in ("linear", "gp"):
            raise ValueError(f"head_mode must be linear or gp, got {self.head_mode!r}")
        if self.objective not in ("cate", "subproblem"):
            raise ValueError(f"objective must be cate or subproblem, got {self.objective!r}")
        for name in ("n_support", "n_query", "batch_size", "max_epochs", "val_interval",
                     "patience", "n_val_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TrainResult:
    params: SharedParams
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    init_val: float = float("inf")


def _grads_by_name(grads, leaves: dict) -> dict:
    return {name: grads[t] for name, t in leaves.items() if t in grads}


def meta_step(params: SharedParams, episodes: list, config: TrainConfig, state: AdamState):
    tape = ad.Tape()
    bound, leaves = params.bind(tape)
    loss = batch_loss(episodes, bound, config.learner, config.head_mode, config.objective, config.pi_clip)
    grads = _grads_by_name(ad.backward(loss), leaves)
    new_params, state = adam_step(params, grads, state)
    return new_params, state, loss.item(), grads


def validation_loss(params: SharedParams, episodes: list, config: TrainConfig) -> float:
    bound, _ = params.bind(None)
    return batch_loss(episodes, bound, config.learner, config.head_mode, config.objective,
                      config.pi_clip).item()


def meta_train(train_tasks: list, val_tasks: list, config: TrainConfig,
               init: SharedParams | None = None, log_path=None) -> TrainResult:
    """Episodic meta-training with early stopping on fixed validation episodes.

    One epoch is one Adam step on a batch of ``batch_size`` tasks drawn with
    replacement, one episode each. The initial parameters compete for "best"
    like any later snapshot.
    """
    if not train_tasks:
        raise ValueError("meta_train: no training tasks")
    needs_labels = config.objective == "cate"
    for t in list(train_tasks) + list(val_tasks):
        if needs_labels and t.pseudo_cate is None:
            raise MetaCateError(f"{t.task_id}: task has no pseudo-CATE labels")
    d = train_tasks[0].d
    params = init if init is not None else init_shared(derive_seed(config.seed, "init"), d, config.head_mode)
    state = AdamState(lr=config.lr)

    val_rng = substream(config.seed, "val-episodes")
    val_eps = [sample_episode(t, config.n_support, config.n_query, val_rng)
               for t in val_tasks for _ in range(config.n_val_episodes)]
    train_rng = substream(config.seed, "train-episodes")

    result = TrainResult(params)
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        if val_eps:
            result.init_val = result.best_val = validation_loss(params, val_eps, config)
        best, since = params, 0
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            picks = train_rng.integers(len(train_tasks), size=config.batch_size)
            episodes = []
            for i in picks:
                try:
                    episodes.append(sample_episode(train_tasks[i], config.n_support, config.n_query, train_rng))
                except MetaCateError as exc:
                    raise type(exc)(f"epoch {epoch}, task {train_tasks[i].task_id}: {exc}") from exc
            params, state, train_loss, _ = meta_step(params, episodes, config, state)
            record = {"epoch": epoch, "train_loss": train_loss}
            stop = False
            if val_eps and epoch % config.val_interval == 0:
                val = validation_loss(params, val_eps, config)
                record["val_loss"] = val
                if val < result.best_val:
                    best, result.best_val, result.best_epoch, since = params, val, epoch, 0
                else:
                    since += 1
                    stop = since >= config.patience
            record["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
            result.log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if stop:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
        result.params = best if val_eps else params
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


# --- evaluation -----------------------------------------------------------

Predictor = Callable[[SupportSet, np.ndarray], np.ndarray]


def meta_predictor(shared: SharedParams, learner="dr", head_mode: str | None = None,
                   pi_clip: float = DEFAULT_PI_CLIP) -> Predictor:
    bound, _ = shared.bind(None)
    kind = LearnerKind(learner)

    def predict(support: SupportSet, x_query: np.ndarray) -> np.ndarray:
        adaptation = adapt(kind, support, bound, head_mode, pi_clip)
        return predict_cate(kind, adaptation, x_query, bound).value.ravel()

    return predict


def evaluation_rows(task: TaskData, n_support, seed: int, repeat: int) -> tuple[np.ndarray, np.ndarray]:
    """Support rows and the complementary query rows; depends only on (seed, task, repeat)."""
    rng = substream(seed, "eval", task.task_id, repeat)
    s = sample_support_rows(task, n_support, rng)
    mask = np.ones(task.n, dtype=bool)
    mask[s] = False
    return s, np.flatnonzero(mask)


def evaluate(tasks: list, predictor: Predictor, n_support=3, n_repeats: int = 30, seed: int = 0,
             method: str = "model") -> PeheSummary:
    """PEHE on every remaining row after drawing a support set, per task and repeat.

    Draws depend only on (seed, task_id, repeat), so every method evaluated with
    the same seed sees identical supports.
    """
    ns = _per_arm(n_support)
    summary = PeheSummary(method, sum(ns), seeds=[int(seed)])
    for task in tasks:
        if task.true_cate is None:
            raise EvaluationError(f"{task.task_id}: no true_cate column to evaluate against")
        for r in range(n_repeats):
            s, q = evaluation_rows(task, ns, seed, r)
            support = SupportSet(task.x[s], task.y[s], task.a[s])
            est = predictor(support, task.x[q])
            summary.values.append({"task_id": task.task_id, "repeat": r,
                                   "pehe": pehe(task.true_cate[q], est)})
    return summary


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def write_log(records: list, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))
