"""PEHE and task-local baselines (difference in means, T-/S-learner with ridge)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EpisodeError, ShapeError

BASELINE_RIDGE_PENALTY = 1.0


def pehe(true_tau, est_tau) -> float:
    """Mean squared error between true and estimated individual effects."""
    t = np.asarray(true_tau, dtype=np.float64).ravel()
    e = np.asarray(est_tau, dtype=np.float64).ravel()
    if t.shape != e.shape:
        raise ShapeError(f"pehe: lengths differ ({t.size} vs {e.size})")
    if t.size == 0:
        raise ShapeError("pehe: need at least one value")
    return float(np.mean((t - e) ** 2))


@dataclass
class PeheSummary:
    method: str
    n_support: int
    values: list = field(default_factory=list)  # dicts: task_id, repeat, pehe
    seeds: list = field(default_factory=list)

    @property
    def pehes(self) -> np.ndarray:
        return np.array([v["pehe"] for v in self.values], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.pehes.mean())

    @property
    def se(self) -> float:
        p = self.pehes
        return float(p.std(ddof=1) / math.sqrt(p.size)) if p.size > 1 else 0.0

    def __str__(self) -> str:
        return f"{self.method} (N^s={self.n_support}): {self.mean:.3f} +/- {self.se:.3f}"


class BaselineKind(str, Enum):
    MEAN_DIFF = "mean"
    T_LEARNER_RIDGE = "tl"
    S_LEARNER_RIDGE = "sl"


def _ridge_with_intercept(x: np.ndarray, y: np.ndarray, lam: float):
    """Ridge with an unpenalized intercept (centering), as linear-regression base learners do."""
    x_mean, y_mean = x.mean(axis=0), y.mean()
    xc = x - x_mean
    k = x.shape[1]
    if x.shape[0] < k:
        coef = xc.T @ np.linalg.solve(xc @ xc.T + lam * np.eye(x.shape[0]), y - y_mean)
    else:
        coef = np.linalg.solve(xc.T @ xc + lam * np.eye(k), xc.T @ (y - y_mean))
    return coef, y_mean - x_mean @ coef


def baseline_predict(kind, support, x_query, lam: float = BASELINE_RIDGE_PENALTY) -> np.ndarray:
    """Per-task baseline CATE predictions for ``x_query`` from a support set (x, y, a)."""
    kind = BaselineKind(kind)
    x = np.asarray(support.x, dtype=np.float64)
    y = np.asarray(support.y, dtype=np.float64).ravel()
    a = np.asarray(support.a).ravel()
    xq = np.asarray(x_query, dtype=np.float64)
    arms = [a == 0, a == 1]
    if not arms[0].any() or not arms[1].any():
        raise EpisodeError(f"baseline {kind.value}: both treatment arms must be present in the support set")
    if kind is BaselineKind.MEAN_DIFF:
        return np.full(xq.shape[0], y[arms[1]].mean() - y[arms[0]].mean())
    if kind is BaselineKind.T_LEARNER_RIDGE:
        preds = []
        for mask in arms:
            coef, icpt = _ridge_with_intercept(x[mask], y[mask], lam)
            preds.append(xq @ coef + icpt)
        return preds[1] - preds[0]
    xa = np.column_stack([x, a])
    coef, icpt = _ridge_with_intercept(xa, y, lam)
    # f(x, 1) - f(x, 0) is the treatment coefficient everywhere
    return np.full(xq.shape[0], coef[-1])


def baseline_predictor(kind, lam: float = BASELINE_RIDGE_PENALTY):
    return lambda support, x_query: baseline_predict(kind, support, x_query, lam)
