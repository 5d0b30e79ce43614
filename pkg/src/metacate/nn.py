"""Task-shared encoders, the shared-parameter container and Adam."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ShapeError

HIDDEN = 32
N_LAYERS = 3
GP_HEADS = ("mu0", "mu1", "y")
GP_FIELDS = ("log_lengthscale", "log_signal", "log_jitter")
CHECKPOINT_FORMAT = "metacate-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Weights and biases of a fully connected ReLU network (last layer linear).

    Entries are numpy arrays for a stored snapshot, or Tensors once bound to a tape.
    Biases are 1 x width row vectors.
    """
    weights: list
    biases: list

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_encoder(rng: np.random.Generator, d: int, widths=(HIDDEN,) * N_LAYERS) -> EncoderParams:
    weights, biases = [], []
    fan_in = d
    for width in widths:
        bound = math.sqrt(6.0 / (fan_in + width))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, width)))
        biases.append(np.zeros((1, width)))
        fan_in = width
    return EncoderParams(weights, biases)


def encode(params: EncoderParams, x) -> Tensor:
    """ReLU(ReLU(x W1 + b1) W2 + b2) W3 + b3, generalized to any depth."""
    x = ad.as_tensor(x)
    if x.cols != params.in_dim:
        raise ShapeError(f"encode: expected {params.in_dim} input columns, got {x.cols}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add_rowvec(ad.matmul(h, ad.as_tensor(w)), ad.as_tensor(b))
        if i < last:
            h = ad.relu(h)
    return h


@dataclass
class SharedParams:
    """All meta-learned quantities: three encoders, log ridge penalties, optional GP kernels.

    ``enc_mu`` is used by both outcome models; their ridge solves stay separate.
    """
    enc_p: EncoderParams
    enc_mu: EncoderParams
    enc_y: EncoderParams
    log_lambda_0: object
    log_lambda_1: object
    log_lambda_y: object
    gp_kernel: dict | None = None  # head -> {field: 1x1}
    mode: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.enc_p.in_dim

    def named_arrays(self) -> dict:
        out = {}
        for enc_name in ("enc_p", "enc_mu", "enc_y"):
            enc = getattr(self, enc_name)
            for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
                out[f"{enc_name}.w{i}"] = w
                out[f"{enc_name}.b{i}"] = b
        for lam in ("log_lambda_0", "log_lambda_1", "log_lambda_y"):
            out[lam] = getattr(self, lam)
        if self.gp_kernel is not None:
            for head in GP_HEADS:
                for f in GP_FIELDS:
                    out[f"gp.{head}.{f}"] = self.gp_kernel[head][f]
        return out

    @classmethod
    def from_named(cls, named: dict, mode: str = "linear") -> "SharedParams":
        def enc(prefix):
            n = sum(1 for k in named if k.startswith(prefix + ".w"))
            return EncoderParams([named[f"{prefix}.w{i}"] for i in range(n)],
                                 [named[f"{prefix}.b{i}"] for i in range(n)])

        gp = None
        if any(k.startswith("gp.") for k in named):
            gp = {h: {f: named[f"gp.{h}.{f}"] for f in GP_FIELDS} for h in GP_HEADS}
        return cls(enc("enc_p"), enc("enc_mu"), enc("enc_y"),
                   named["log_lambda_0"], named["log_lambda_1"], named["log_lambda_y"],
                   gp, mode)

    def bind(self, tape: ad.Tape | None = None) -> tuple["SharedParams", dict]:
        """Tensor view of the parameters: tape leaves, or constants when ``tape`` is None."""
        leaves = {}
        for name, arr in self.named_arrays().items():
            leaves[name] = tape.leaf(arr, name) if tape is not None else ad.constant(arr)
        return SharedParams.from_named(leaves, self.mode), leaves

    def lam(self, which: str) -> Tensor:
        """Positive ridge penalty exp(log_lambda_<which>) as a 1x1 tensor."""
        return ad.exp(ad.as_tensor(getattr(self, f"log_lambda_{which}")))

    def copy(self) -> "SharedParams":
        return SharedParams.from_named({k: np.array(v, copy=True) for k, v in self.named_arrays().items()},
                                       self.mode)


def init_shared(seed: int, d: int, mode: str = "linear") -> SharedParams:
    if d < 1:
        raise ValueError("input dimension must be >= 1")
    if mode not in ("linear", "gp"):
        raise ValueError(f"unknown head mode {mode!r}")
    rng = np.random.default_rng(seed)
    encs = [init_encoder(rng, d) for _ in range(3)]
    zero = lambda: np.zeros((1, 1))  # noqa: E731
    gp = None
    if mode == "gp":
        gp = {h: {"log_lengthscale": zero(), "log_signal": zero(),
                  "log_jitter": np.full((1, 1), math.log(1e-4))} for h in GP_HEADS}
    return SharedParams(*encs, zero(), zero(), zero(), gp, mode)


# --- Adam -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(named: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Adam on a name -> array mapping; names absent from ``grads`` are left alone."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"adam_step: non-finite gradient for {name}")
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    named = dict(named)
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for name, g in grads.items():
        p = named[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        m_new = state.beta1 * m.get(name, 0.0) + (1.0 - state.beta1) * g
        v_new = state.beta2 * v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        m[name], v[name] = m_new, v_new
        named[name] = p - state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
    return named, AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m, v)


def adam_step(params: SharedParams, grads: dict, state: AdamState) -> tuple[SharedParams, AdamState]:
    named, state = adam_update(params.named_arrays(), grads, state)
    return SharedParams.from_named(named, params.mode), state


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(params: SharedParams, path, meta: dict | None = None) -> None:
    tensors = {}
    for name, arr in params.named_arrays().items():
        arr = np.asarray(arr, dtype=np.float64)
        tensors[name] = {"shape": list(arr.shape), "values": [float(x) for x in arr.ravel()]}
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "mode": params.mode,
            "in_dim": params.in_dim, "meta": meta or {}, "tensors": tensors}
    Path(path).write_text(json.dumps(blob, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[SharedParams, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    named = {}
    for name, t in blob["tensors"].items():
        named[name] = np.array(t["values"], dtype=np.float64).reshape(t["shape"])
    return SharedParams.from_named(named, blob["mode"]), blob.get("meta", {})
