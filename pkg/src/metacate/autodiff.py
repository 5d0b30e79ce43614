"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D :class:`Tensor`. Operations whose inputs live on a
:class:`Tape` append a record holding a closure that maps the output
cotangent to input cotangents; :func:`backward` replays those records in
reverse. Inputs without a tape are constants and are never differentiated.

Only what the meta-learner needs is here: matrix products, a handful of
elementwise maps, row selection and reductions, and an SPD linear solve
whose adjoint is implemented directly (no explicit inverse).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import DomainError, NumericalError, ShapeError

__all__ = [
    "Tensor", "Tape", "GradientMap", "backward", "constant", "as_tensor",
    "matmul", "elementwise", "add", "sub", "mul", "div", "scale", "shift", "neg",
    "relu", "exp", "log", "square", "sigmoid", "softplus", "clip",
    "transpose", "add_rowvec", "sum", "take_rows", "concat_rows", "detach",
    "solve_spd", "eye",
]


class Tensor:
    """Immutable 2-D float64 matrix, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        v = np.array(value, dtype=np.float64)  # always copy: tensors own their buffer
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(-1, 1)
        elif v.ndim != 2:
            raise ShapeError(f"Tensor must be at most 2-D, got ndim={v.ndim}")
        _check_finite(v, "tensor creation")
        v.flags.writeable = False
        self.value = v
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, v: np.ndarray, tape, node) -> "Tensor":
        # fast path for op outputs: buffer is fresh and already 2-D float64
        t = object.__new__(cls)
        v.flags.writeable = False
        t.value, t.tape, t.node = v, tape, node
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(neg(self), float(other))
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass
class _Record:
    kind: str
    inputs: tuple  # node ids (None for constants)
    backward: Callable[[np.ndarray], tuple] | None


class Tape:
    """Ordered operation log. Node ids index ``records``, so order is topological."""

    def __init__(self):
        self.records: list[_Record] = []
        self.leaf_names: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.records)

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value)
        node = len(self.records)
        self.records.append(_Record("leaf", (), None))
        if name is not None:
            self.leaf_names[node] = name
        t.tape, t.node = self, node
        return t

    def _push(self, kind, out: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
        _check_finite(out, kind)
        node = len(self.records)
        self.records.append(_Record(kind, tuple(x.node for x in inputs), fn))
        return Tensor._wrap(out, self, node)


class GradientMap(dict):
    """node id -> gradient array. Indexable by Tensor as well as by node id."""

    def _key(self, k):
        return k.node if isinstance(k, Tensor) else k

    def __getitem__(self, k):
        return dict.__getitem__(self, self._key(k))

    def __contains__(self, k):
        return dict.__contains__(self, self._key(k))

    def get(self, k, default=None):
        return dict.get(self, self._key(k), default)


def _check_finite(v: np.ndarray, where: str) -> None:
    if not np.isfinite(v).all():
        raise NumericalError(f"non-finite value produced by {where}")


def constant(value) -> Tensor:
    return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


def _tape_of(*xs: Tensor) -> "Tape | None":
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _emit(kind, out, inputs, fn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        _check_finite(out, kind)
        return Tensor._wrap(out, None, None)
    return tape._push(kind, out, inputs, fn)


def _same_shape(kind, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def solve_spd(a: Tensor, b: Tensor) -> Tensor:
    """X = A^{-1} B for symmetric positive definite A (Cholesky).

    The gradient with respect to A is symmetrized, which is exact whenever A
    is built symmetrically upstream (Gram matrices, kernels, +lambda*I).
    """
    n, m = a.shape
    if n != m:
        raise ShapeError(f"solve_spd: A must be square, got {a.shape}")
    if b.rows != n:
        raise ShapeError(f"solve_spd: A is {a.shape} but B is {b.shape}")
    try:
        factor = linalg.cho_factor(a.value, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"solve_spd: Cholesky factorization failed ({exc})") from None
    x = linalg.cho_solve(factor, b.value, check_finite=False)

    def back(g):
        gb = linalg.cho_solve(factor, g, check_finite=False)
        ga = -gb @ x.T
        return (0.5 * (ga + ga.T), gb)

    return _emit("solve_spd", x, (a, b), back)


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python scalar or by a 1x1 tensor."""
    if not isinstance(s, Tensor):
        s = float(s)
        return _emit("scale", a.value * s, (a,), lambda g: (g * s,))
    if s.shape != (1, 1):
        raise ShapeError(f"scale: factor must be 1x1, got {s.shape}")
    av, sv = a.value, s.value[0, 0]
    return _emit("scale", av * sv, (a, s),
                 lambda g: (g * sv, np.array([[np.sum(g * av)]])))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("shift", a.value + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0  # subgradient 0 at 0
    return _emit("relu", a.value * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    if (av <= 0.0).any():
        raise DomainError("log: input must be strictly positive")
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.value)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    av = a.value
    out = np.logaddexp(0.0, av)
    return _emit("softplus", out, (a,), lambda g: (g * expit(av),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _emit("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "exp": exp, "log": log, "square": square,
    "sigmoid": sigmoid, "softplus": softplus, "neg": neg,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a scalar (or 1x1 tensor) as ``b``."""
    if kind == "scale":
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return fn(a, as_tensor(b))
    return fn(a)


# --- structural -----------------------------------------------------------

def add_rowvec(a: Tensor, r: Tensor) -> Tensor:
    """a + r broadcast over rows; r is 1 x cols (bias addition)."""
    if r.rows != 1 or r.cols != a.cols:
        raise ShapeError(f"add_rowvec: {a.shape} + {r.shape}")
    return _emit("add_rowvec", a.value + r.value, (a, r),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    av = a.value
    if axis is None:
        return _emit("sum", np.array([[av.sum()]]), (a,),
                     lambda g: (np.full(av.shape, g[0, 0]),))
    if axis not in (0, 1):
        raise ValueError("axis must be None, 0 or 1")
    out = av.sum(axis=axis, keepdims=True)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.rows

    def back(g):
        out = np.zeros((n, a.cols))
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", a.value[idx], (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.rows for p in parts])
    out = np.concatenate([p.value for p in parts], axis=0)
    return _emit("concat_rows", out, tuple(parts),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.value, None, None)


# --- backward -------------------------------------------------------------

def backward(loss: Tensor) -> GradientMap:
    """Gradients of a 1x1 ``loss`` with respect to every reachable leaf."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    grads = GradientMap()
    if loss.tape is None:
        return grads
    records = loss.tape.records
    pending: dict[int, np.ndarray] = {loss.node: np.ones((1, 1))}
    for node in range(loss.node, -1, -1):
        g = pending.pop(node, None)
        if g is None:
            continue
        rec = records[node]
        if rec.backward is None:
            grads[node] = g
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if inp is None:
                continue
            prev = pending.get(inp)
            pending[inp] = gi if prev is None else prev + gi
    return grads
