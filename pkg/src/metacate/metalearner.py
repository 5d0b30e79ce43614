"""Per-episode CATE estimators assembled from closed-form heads.

Three learners share one adaptation path and differ only in the pseudo
outcome and the final predictor:

* DR: propensity prototypes + outcome heads -> doubly robust pseudo outcome -> tau head
* RA: outcome heads -> regression-adjusted pseudo outcome -> tau head
* Plugin: outcome heads only, tau(x) = mu1(x) - mu0(x)
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EpisodeError, ParameterError, ShapeError
from .heads import (GPHead, GPKernel, Prototypes, RidgeHead, gp_fit, gp_predict,
                    propensity, prototype_means, ridge_fit, ridge_predict)
from .nn import SharedParams, encode

DEFAULT_PI_CLIP = 1e-3


class LearnerKind(str, Enum):
    DR = "dr"
    RA = "ra"
    PLUGIN = "plugin"


def dr_pseudo_outcome(y, a, pi, mu0, mu1):
    """Doubly robust pseudo outcome; works elementwise on scalars or arrays."""
    y, a, pi, mu0, mu1 = (np.asarray(v, dtype=np.float64) for v in (y, a, pi, mu0, mu1))
    if np.any((pi <= 0.0) | (pi >= 1.0)):
        raise ParameterError("dr_pseudo_outcome: propensity must lie strictly inside (0, 1)")
    w1 = a / pi
    w0 = (1.0 - a) / (1.0 - pi)
    out = (w1 - w0) * y + (1.0 - w1) * mu1 - (1.0 - w0) * mu0
    return float(out) if out.ndim == 0 else out


def ra_pseudo_outcome(y, a, mu0, mu1):
    y, a, mu0, mu1 = (np.asarray(v, dtype=np.float64) for v in (y, a, mu0, mu1))
    out = a * (y - mu0) + (1.0 - a) * (mu1 - y)
    return float(out) if out.ndim == 0 else out


def _col(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1, 1)


def dr_pseudo_tensor(y, a, pi: Tensor, mu0: Tensor, mu1: Tensor) -> Tensor:
    """Tape version of :func:`dr_pseudo_outcome` for observed columns ``y``, ``a``."""
    a_col, y = _col(a), ad.constant(_col(y))
    w1 = ad.div(ad.constant(a_col), pi)
    w0 = ad.div(ad.constant(1.0 - a_col), ad.shift(ad.neg(pi), 1.0))
    return ad.sub(ad.add(ad.mul(ad.sub(w1, w0), y), ad.mul(ad.shift(ad.neg(w1), 1.0), mu1)),
                  ad.mul(ad.shift(ad.neg(w0), 1.0), mu0))


def ra_pseudo_tensor(y, a, mu0: Tensor, mu1: Tensor) -> Tensor:
    a_col, y = _col(a), ad.constant(_col(y))
    return ad.add(ad.mul(ad.constant(a_col), ad.sub(y, mu0)),
                  ad.mul(ad.constant(1.0 - a_col), ad.sub(mu1, y)))


@dataclass
class EpisodeAdaptation:
    kind: LearnerKind
    head_mode: str
    mu0: RidgeHead | GPHead
    mu1: RidgeHead | GPHead
    prototypes: Prototypes | None = None
    tau: RidgeHead | GPHead | None = None
    pseudo_outcome: Tensor | None = None  # N^s x 1
    support_pi: Tensor | None = None


def _kernel(shared: SharedParams, head: str) -> GPKernel:
    if shared.gp_kernel is None:
        raise ParameterError("GP heads requested but shared parameters carry no kernel")
    k = shared.gp_kernel[head]
    return GPKernel.from_logs(k["log_lengthscale"], k["log_signal"], k["log_jitter"])


def _fit(z, targets, shared, head_mode, which):
    if head_mode == "linear":
        return ridge_fit(z, targets, shared.lam(which))
    return gp_fit(z, targets, _kernel(shared, "y" if which == "y" else f"mu{which}"))


def _predict(head, z) -> Tensor:
    if isinstance(head, RidgeHead):
        return ridge_predict(head, z)
    return gp_predict(head, z)


def support_encodings(shared: SharedParams, x, kind: LearnerKind) -> dict:
    """Encoder outputs needed by ``adapt``; exposed so batches can encode rows once."""
    kind = LearnerKind(kind)
    enc = {"mu": encode(shared.enc_mu, x)}
    if kind is LearnerKind.DR:
        enc["p"] = encode(shared.enc_p, x)
    if kind is not LearnerKind.PLUGIN:
        enc["y"] = encode(shared.enc_y, x)
    return enc


def adapt(kind, support, shared: SharedParams, head_mode: str | None = None,
          pi_clip: float = DEFAULT_PI_CLIP, encodings: dict | None = None) -> EpisodeAdaptation:
    """Fit every task-specific head on the support set (``support`` has x, y, a)."""
    kind = LearnerKind(kind)
    head_mode = head_mode or shared.mode
    a = np.asarray(support.a).ravel().astype(np.int64)
    y = _col(support.y)
    if y.shape[0] != a.shape[0]:
        raise ShapeError("adapt: support y and a lengths differ")
    idx = [np.flatnonzero(a == arm) for arm in (0, 1)]
    for arm in (0, 1):
        if idx[arm].size == 0:
            raise EpisodeError(f"adapt: treatment arm {arm} is empty in the support set")
    if encodings is None:
        encodings = support_encodings(shared, support.x, kind)

    z_mu = encodings["mu"]
    mu_heads = [_fit(ad.take_rows(z_mu, idx[arm]), ad.constant(y[idx[arm]]), shared, head_mode, str(arm))
                for arm in (0, 1)]
    out = EpisodeAdaptation(kind, head_mode, mu_heads[0], mu_heads[1])
    if kind is LearnerKind.PLUGIN:
        return out

    mu0_s = _predict(mu_heads[0], z_mu)
    mu1_s = _predict(mu_heads[1], z_mu)
    if kind is LearnerKind.DR:
        protos = prototype_means(encodings["p"], a)
        pi = ad.clip(propensity(encodings["p"], protos), pi_clip, 1.0 - pi_clip)
        pseudo = dr_pseudo_tensor(y, a, pi, mu0_s, mu1_s)
        out.prototypes, out.support_pi = protos, pi
    else:
        pseudo = ra_pseudo_tensor(y, a, mu0_s, mu1_s)
    out.pseudo_outcome = pseudo
    out.tau = _fit(encodings["y"], pseudo, shared, head_mode, "y")
    return out


def predict_cate(kind, adaptation: EpisodeAdaptation, x_query, shared: SharedParams,
                 encodings: dict | None = None) -> Tensor:
    """CATE estimates for the query rows as an m x 1 column."""
    kind = LearnerKind(kind)
    if kind is not adaptation.kind:
        raise ValueError(f"adaptation was built for {adaptation.kind.value}, not {kind.value}")
    if kind is LearnerKind.PLUGIN:
        z = encodings["mu"] if encodings else encode(shared.enc_mu, x_query)
        return ad.sub(_predict(adaptation.mu1, z), _predict(adaptation.mu0, z))
    z = encodings["y"] if encodings else encode(shared.enc_y, x_query)
    return _predict(adaptation.tau, z)


def predict_components(adaptation: EpisodeAdaptation, x, shared: SharedParams,
                       encodings: dict | None = None, pi_clip: float = DEFAULT_PI_CLIP) -> dict:
    """Sub-model outputs (pi, mu0, mu1) at new rows, for sub-problem losses."""
    enc = encodings or {}
    z_mu = enc["mu"] if "mu" in enc else encode(shared.enc_mu, x)
    out = {"mu0": _predict(adaptation.mu0, z_mu), "mu1": _predict(adaptation.mu1, z_mu)}
    if adaptation.prototypes is not None:
        z_p = enc["p"] if "p" in enc else encode(shared.enc_p, x)
        out["pi"] = ad.clip(propensity(z_p, adaptation.prototypes), pi_clip, 1.0 - pi_clip)
    return out
