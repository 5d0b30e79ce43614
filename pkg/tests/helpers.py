"""Test oracles: central finite differences and small fixtures shared across modules."""
import numpy as np

from metacate import autodiff as ad
from metacate.data import TaskData


def numeric_grad(f, arrays: dict, name: str, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f(arrays)`` with respect to ``arrays[name]``."""
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    target = base[name]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        old = target[idx]
        target[idx] = old + h
        up = f(base)
        target[idx] = old - h
        down = f(base)
        target[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def rel_err(g: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |g - fd| / max(|g|, floor)."""
    g, fd = np.asarray(g), np.asarray(fd)
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(g), floor))) if g.size else 0.0


def tape_grads(f, arrays: dict) -> tuple[float, dict]:
    """Evaluate ``f`` (which maps name -> Tensor to a 1x1 Tensor) on a tape; return value and grads."""
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in arrays.items()}
    loss = f(leaves)
    grads = ad.backward(loss)
    return loss.item(), {k: grads.get(t, np.zeros_like(np.asarray(arrays[k], dtype=float)))
                         for k, t in leaves.items()}


def fd_noise(fval: float, h: float) -> float:
    """Rough round-off level of a central difference of a function of size ``fval``."""
    return np.finfo(np.float64).eps * max(1.0, abs(fval)) / h


def check_grads(f, arrays: dict, h: float = 1e-5, noise_floor: bool = False) -> float:
    """Worst relative error between backward and finite differences over every input.

    With ``noise_floor`` the denominator is never below the level at which the
    difference itself can be trusted to four digits.
    """
    fval, grads = tape_grads(f, arrays)
    floor = max(1e-8, 1e4 * fd_noise(fval, h)) if noise_floor else 1e-8

    def scalar(arrs):
        return f({k: ad.constant(v) for k, v in arrs.items()}).item()

    return max(rel_err(grads[k], numeric_grad(scalar, arrays, k, h), floor) for k in arrays)


def linear_task(n=2000, d=6, seed=0, noise=0.0, effect=None, task_id="lin"):
    """Task with linear arm outcomes; ``effect`` fixes a constant treatment effect."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    w0 = rng.standard_normal(d)
    w1 = rng.standard_normal(d)
    mu0 = x @ w0
    cate = np.full(n, float(effect)) if effect is not None else x @ (w1 - w0)
    a = (rng.random(n) < 0.5).astype(int)
    y = mu0 + a * cate + noise * rng.standard_normal(n)
    return TaskData(task_id, x, y, a, true_cate=cate)
