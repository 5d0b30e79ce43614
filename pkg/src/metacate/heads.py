"""Closed-form task-specific heads.

* prototype propensity: arm means of encoded support rows, softmax over
  negative squared distances;
* ridge heads: linear readout solved exactly, in feature space or (when
  there are fewer rows than features) in sample space via Woodbury;
* GP heads: RBF-kernel posterior mean with a jitter term.

All of them are written with :mod:`metacate.autodiff` ops so gradients reach
the encodings, the targets and the penalty/kernel parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EpisodeError, NumericalError, ParameterError, ShapeError


@dataclass
class Prototypes:
    theta_p0: Tensor  # 1 x K
    theta_p1: Tensor


def _arm_rows(a, arm: int) -> np.ndarray:
    return np.flatnonzero(np.asarray(a).ravel() == arm)


def prototype_means(z_support: Tensor, a_support) -> Prototypes:
    a = np.asarray(a_support).ravel()
    if a.shape[0] != z_support.rows:
        raise ShapeError(f"prototype_means: {z_support.rows} encodings but {a.shape[0]} treatments")
    protos = []
    for arm in (0, 1):
        idx = _arm_rows(a, arm)
        if idx.size == 0:
            raise EpisodeError(f"prototype_means: treatment arm {arm} is empty in the support set")
        protos.append(ad.scale(ad.sum(ad.take_rows(z_support, idx), axis=0), 1.0 / idx.size))
    return Prototypes(*protos)


def _sq_dist_to(z: Tensor, proto: Tensor) -> Tensor:
    return ad.sum(ad.square(ad.add_rowvec(z, ad.neg(proto))), axis=1)


def propensity(z: Tensor, protos: Prototypes) -> Tensor:
    """P(treated | z) as an m x 1 column.

    exp(-d1) / (exp(-d0) + exp(-d1)) == sigmoid(d0 - d1), which is the stable form.
    """
    d0 = _sq_dist_to(z, protos.theta_p0)
    d1 = _sq_dist_to(z, protos.theta_p1)
    return ad.sigmoid(ad.sub(d0, d1))


# --- ridge ----------------------------------------------------------------

@dataclass
class RidgeHead:
    theta: Tensor  # K x 1
    lambda_used: float


def _as_penalty(lam) -> Tensor:
    if isinstance(lam, Tensor):
        if lam.shape != (1, 1):
            raise ShapeError(f"ridge penalty must be 1x1, got {lam.shape}")
        value = lam.item()
    else:
        value = float(lam)
        lam = ad.constant(value)
    if not value > 0.0:
        raise ParameterError(f"ridge penalty must be > 0, got {value}")
    return lam


def ridge_fit(z: Tensor, y, lam, method: str = "auto") -> RidgeHead:
    """theta = argmin ||y - Z theta||^2 + lam ||theta||^2.

    ``method``: "direct" solves the K x K system (Z'Z + lam I) theta = Z'y;
    "woodbury" solves the n x n system and maps back, theta = Z'(ZZ' + lam I)^{-1} y;
    "auto" picks woodbury when n < K.
    """
    y = ad.as_tensor(y)
    n, k = z.shape
    if n < 1:
        raise ShapeError("ridge_fit: need at least one row")
    if y.shape != (n, 1):
        raise ShapeError(f"ridge_fit: targets must be {n}x1, got {y.shape}")
    lam = _as_penalty(lam)
    if method == "auto":
        method = "woodbury" if n < k else "direct"
    zt = ad.transpose(z)
    if method == "direct":
        gram = ad.add(ad.matmul(zt, z), ad.scale(ad.eye(k), lam))
        theta = ad.solve_spd(gram, ad.matmul(zt, y))
    elif method == "woodbury":
        gram = ad.add(ad.matmul(z, zt), ad.scale(ad.eye(n), lam))
        theta = ad.matmul(zt, ad.solve_spd(gram, y))
    else:
        raise ValueError(f"unknown ridge method {method!r}")
    return RidgeHead(theta, lam.item())


def ridge_predict(head: RidgeHead, z: Tensor) -> Tensor:
    if z.cols != head.theta.rows:
        raise ShapeError(f"ridge_predict: encodings have {z.cols} columns, head expects {head.theta.rows}")
    return ad.matmul(z, head.theta)


# --- Gaussian process -----------------------------------------------------

@dataclass
class GPKernel:
    """RBF kernel sigma2 * exp(-||u - v||^2 / (2 lengthscale^2)) plus diagonal jitter."""
    lengthscale: Tensor
    signal: Tensor
    jitter: Tensor

    @classmethod
    def from_values(cls, lengthscale=1.0, signal=1.0, jitter=1e-4) -> "GPKernel":
        return cls(ad.constant(lengthscale), ad.constant(signal), ad.constant(jitter))

    @classmethod
    def from_logs(cls, log_lengthscale, log_signal, log_jitter) -> "GPKernel":
        return cls(ad.exp(ad.as_tensor(log_lengthscale)), ad.exp(ad.as_tensor(log_signal)),
                   ad.exp(ad.as_tensor(log_jitter)))


def _sq_dists(u: Tensor, v: Tensor, same: bool) -> Tensor:
    ru = ad.sum(ad.square(u), axis=1)  # n x 1
    rv = ad.sum(ad.square(v), axis=1)  # m x 1
    n, m = u.rows, v.rows
    d = ad.add(ad.add(ad.matmul(ru, ad.constant(np.ones((1, m)))),
                      ad.matmul(ad.constant(np.ones((n, 1))), ad.transpose(rv))),
               ad.scale(ad.matmul(u, ad.transpose(v)), -2.0))
    if same:
        d = ad.mul(d, ad.constant(1.0 - np.eye(n)))  # exact zeros on the diagonal
    return d


def rbf(u: Tensor, v: Tensor, kernel: GPKernel, same: bool = False) -> Tensor:
    inv2l2 = ad.div(ad.constant(0.5), ad.square(kernel.lengthscale))
    return ad.scale(ad.exp(ad.neg(ad.scale(_sq_dists(u, v, same), inv2l2))), kernel.signal)


@dataclass
class GPHead:
    z_support: Tensor
    kernel: GPKernel
    cache: Tensor  # (K + jitter I)^{-1} targets, n x 1


def gp_fit(z_support: Tensor, targets, kernel: GPKernel) -> GPHead:
    targets = ad.as_tensor(targets)
    n = z_support.rows
    if n < 1:
        raise ShapeError("gp_fit: need at least one support row")
    if targets.shape != (n, 1):
        raise ShapeError(f"gp_fit: targets must be {n}x1, got {targets.shape}")
    if not kernel.jitter.item() > 0.0:
        raise ParameterError("gp_fit: jitter must be > 0")
    gram = ad.add(rbf(z_support, z_support, kernel, same=True),
                  ad.scale(ad.eye(n), kernel.jitter))
    try:
        cache = ad.solve_spd(gram, targets)
    except NumericalError as exc:
        raise NumericalError(f"gp_fit: {exc}; consider increasing the kernel jitter") from None
    return GPHead(z_support, kernel, cache)


def gp_predict(head: GPHead, z: Tensor) -> Tensor:
    if z.cols != head.z_support.cols:
        raise ShapeError(f"gp_predict: encodings have {z.cols} columns, head expects {head.z_support.cols}")
    return ad.matmul(rbf(z, head.z_support, head.kernel), head.cache)
