"""Pseudo-CATE labels from an RA-Learner fitted on a task's full data.

Each task gets three small MLP regressions (one outcome model per arm, then
a regression of the RA pseudo outcome on x); the fitted effect model is
evaluated on every row. Labels are cached next to the task files as
``<task_id>.labels.csv`` plus a ``.labels.json`` sidecar.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import TaskData
from .errors import LabelingError
from .metalearner import ra_pseudo_outcome
from .nn import AdamState, EncoderParams, adam_update, encode, init_encoder
from .seeding import derive_seed, substream

log = logging.getLogger(__name__)

MIN_TASK_SIZE = 20
MIN_ARM_SIZE = 5


@dataclass(frozen=True)
class LabelConfig:
    max_epochs: int = 2000
    patience: int = 20
    holdout: float = 0.1
    batch_size: int = 128
    lr: float = 1e-3
    hidden: int = 32
    n_layers: int = 3

    def digest(self, seed: int) -> str:
        blob = json.dumps({"config": asdict(self), "seed": int(seed)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PseudoCateLabels:
    task_id: str
    values: np.ndarray
    diagnostics: dict = field(default_factory=dict)


class MLPRegressor:
    """Encoder + linear readout trained with Adam on standardized targets and early stopping."""

    def __init__(self, params: EncoderParams, readout: np.ndarray, y_mean: float, y_scale: float):
        self.params, self.readout = params, readout
        self.y_mean, self.y_scale = y_mean, y_scale

    def predict(self, x) -> np.ndarray:
        out = ad.matmul(encode(self.params, x), ad.constant(self.readout)).value.ravel()
        return self.y_mean + self.y_scale * out

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, config: LabelConfig, rng: np.random.Generator):
        n = x.shape[0]
        order = rng.permutation(n)
        n_hold = max(1, int(round(config.holdout * n)))
        hold, train = order[:n_hold], order[n_hold:]
        y_mean = float(y[train].mean())
        y_scale = float(y[train].std()) or 1.0
        ys = ((y - y_mean) / y_scale)[:, None]

        enc = init_encoder(rng, x.shape[1], (config.hidden,) * config.n_layers)
        named = {f"w{i}": w for i, w in enumerate(enc.weights)}
        named.update({f"b{i}": b for i, b in enumerate(enc.biases)})
        bound = np.sqrt(6.0 / (config.hidden + 1))
        named["readout"] = rng.uniform(-bound, bound, size=(config.hidden, 1))
        depth = config.n_layers

        def unpack(d):
            return EncoderParams([d[f"w{i}"] for i in range(depth)], [d[f"b{i}"] for i in range(depth)]), d["readout"]

        def holdout_mse(d):
            p, r = unpack(d)
            pred = ad.matmul(encode(p, x[hold]), ad.constant(r)).value
            return float(np.mean((pred - ys[hold]) ** 2))

        state = AdamState(lr=config.lr)
        best, best_loss, since, epoch = dict(named), holdout_mse(named), 0, 0
        for epoch in range(1, config.max_epochs + 1):
            perm = rng.permutation(train)
            for start in range(0, perm.size, config.batch_size):
                rows = perm[start:start + config.batch_size]
                tape = ad.Tape()
                leaves = {k: tape.leaf(v, k) for k, v in named.items()}
                p, r = unpack(leaves)
                resid = ad.sub(ad.matmul(encode(p, x[rows]), r), ad.constant(ys[rows]))
                loss = ad.scale(ad.sum(ad.square(resid)), 1.0 / rows.size)
                grads = ad.backward(loss)
                named, state = adam_update(named, {k: grads[t] for k, t in leaves.items() if t in grads}, state)
            current = holdout_mse(named)
            if current < best_loss:
                best, best_loss, since = dict(named), current, 0
            else:
                since += 1
                if since >= config.patience:
                    break
        p, r = unpack(best)
        model = cls(p, r, y_mean, y_scale)
        return model, {"epochs": epoch, "holdout_mse": best_loss * y_scale ** 2}


def fit_pseudo_cate(task: TaskData, config: LabelConfig = LabelConfig(), seed: int = 0,
                    return_model: bool = False):
    """RA-Learner on the whole task: outcome MLP per arm, RA pseudo outcomes, effect MLP."""
    if task.n < MIN_TASK_SIZE:
        raise LabelingError(f"{task.task_id}: task has {task.n} rows, need >= {MIN_TASK_SIZE}")
    n0, n1 = task.arm_counts()
    if min(n0, n1) < MIN_ARM_SIZE:
        raise LabelingError(f"{task.task_id}: degenerate arm (untreated={n0}, treated={n1}), "
                            f"need >= {MIN_ARM_SIZE} each")
    diagnostics = {}
    mu = []
    for arm in (0, 1):
        rows = np.flatnonzero(task.a == arm)
        model, diag = MLPRegressor.fit(task.x[rows], task.y[rows], config, substream(seed, f"mu{arm}"))
        diagnostics[f"mu{arm}"] = diag
        mu.append(model.predict(task.x))
    pseudo = ra_pseudo_outcome(task.y, task.a, mu[0], mu[1])
    tau_model, diag = MLPRegressor.fit(task.x, pseudo, config, substream(seed, "tau"))
    diagnostics["tau"] = diag
    labels = PseudoCateLabels(task.task_id, tau_model.predict(task.x), diagnostics)
    return (labels, tau_model) if return_model else labels


def _label_paths(data_dir, task_id):
    d = Path(data_dir)
    return d / f"{task_id}.labels.csv", d / f"{task_id}.labels.json"


def save_labels(labels: PseudoCateLabels, data_dir, config_hash: str, seed: int) -> None:
    csv_path, side_path = _label_paths(data_dir, labels.task_id)
    table = np.column_stack([np.arange(labels.values.size), labels.values])
    np.savetxt(csv_path, table, fmt=["%d", "%.17g"], delimiter=",", header="row_index,pseudo_cate", comments="")
    sidecar = {"task_id": labels.task_id, "config_hash": config_hash, "seed": int(seed),
               "n": int(labels.values.size), "diagnostics": labels.diagnostics}
    side_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_labels(data_dir, task_id: str, config_hash: str | None = None) -> PseudoCateLabels | None:
    """Cached labels, or None when missing or produced under a different config."""
    csv_path, side_path = _label_paths(data_dir, task_id)
    if not (csv_path.exists() and side_path.exists()):
        return None
    sidecar = json.loads(side_path.read_text())
    if config_hash is not None and sidecar.get("config_hash") != config_hash:
        return None
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    values = np.empty(table.shape[0])
    values[table[:, 0].astype(np.int64)] = table[:, 1]
    return PseudoCateLabels(task_id, values, sidecar.get("diagnostics", {}))


def _label_one(args):
    task, config, task_seed = args
    try:
        return fit_pseudo_cate(task, config, task_seed)
    except LabelingError:
        raise
    except Exception as exc:  # attach task context
        raise LabelingError(f"{task.task_id}: labeling failed: {exc}") from exc


def _label_or_error(args):
    try:
        return _label_one(args)
    except LabelingError as exc:
        return exc


def label_all_tasks(tasks: list, config: LabelConfig = LabelConfig(), seed: int = 0,
                    data_dir=None, threads: int = 1) -> list[PseudoCateLabels]:
    """Label every task with a per-task seed; completed tasks in ``data_dir`` are reused."""
    results: dict[str, PseudoCateLabels] = {}
    todo = []
    for task in tasks:
        task_seed = derive_seed(seed, "label", task.task_id)
        cached = None
        if data_dir is not None:
            cached = load_labels(data_dir, task.task_id, config.digest(task_seed))
        if cached is not None and cached.values.size == task.n:
            results[task.task_id] = cached
        else:
            todo.append((task, config, task_seed))

    failures = []

    def finish(item, labels):
        task, _, task_seed = item
        if isinstance(labels, LabelingError):
            failures.append((task.task_id, labels))
            return
        results[task.task_id] = labels
        if data_dir is not None:
            save_labels(labels, data_dir, config.digest(task_seed), task_seed)
        log.info("labeled %s", task.task_id)

    # every task is attempted; failures are reported together at the end
    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for item, labels in zip(todo, pool.map(_label_or_error, todo)):
                finish(item, labels)
    else:
        for item in todo:
            finish(item, _label_or_error(item))
    if failures:
        err = LabelingError("; ".join(str(e) for _, e in failures))
        err.task_ids = [tid for tid, _ in failures]
        raise err
    return [results[t.task_id] for t in tasks]


def attach_labels(tasks: list, labels: list) -> list:
    return [t.with_pseudo_cate(l.values) for t, l in zip(tasks, labels)]
