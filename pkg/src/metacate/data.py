"""Synthetic CATE tasks, the task CSV format, and task splitting.

Task file layout inside a data directory::

    <task_id>.csv           x_0..x_{d-1}, y, a [, true_cate] [, pseudo_cate]
    <task_id>.spec.json     generator parameters (synthetic tasks only)
    manifest.json           suite listing (synthetic suites only)
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import SplitError, TaskFormatError
from .seeding import derive_seed, substream

SYNTH_DIM = 25
SUBSET_SIZE = 5
MANIFEST = "manifest.json"


@dataclass
class TaskData:
    task_id: str
    x: np.ndarray  # n x d
    y: np.ndarray  # n
    a: np.ndarray  # n, values in {0, 1}
    true_cate: np.ndarray | None = None
    pseudo_cate: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.a = np.asarray(self.a).ravel()
        if self.true_cate is not None:
            self.true_cate = np.asarray(self.true_cate, dtype=np.float64).ravel()
        if self.pseudo_cate is not None:
            self.pseudo_cate = np.asarray(self.pseudo_cate, dtype=np.float64).ravel()
        self.validate()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def validate(self) -> None:
        if self.x.ndim != 2:
            raise TaskFormatError(f"{self.task_id}: x must be 2-D")
        n = self.x.shape[0]
        for name in ("y", "a", "true_cate", "pseudo_cate"):
            col = getattr(self, name)
            if col is not None and col.shape[0] != n:
                raise TaskFormatError(f"{self.task_id}: column {name} has {col.shape[0]} rows, x has {n}")
        if not np.isin(self.a, (0, 1)).all():
            raise TaskFormatError(f"{self.task_id}: treatment must be binary (0/1)")
        self.a = self.a.astype(np.int64)
        if not (self.a == 0).any() or not (self.a == 1).any():
            raise TaskFormatError(f"{self.task_id}: both treatment arms must be non-empty")

    def arm_counts(self) -> tuple[int, int]:
        n1 = int(self.a.sum())
        return self.n - n1, n1

    def subset(self, rows, task_id: str | None = None) -> "TaskData":
        rows = np.asarray(rows)
        pick = lambda c: None if c is None else c[rows]  # noqa: E731
        return TaskData(task_id or self.task_id, self.x[rows], self.y[rows], self.a[rows],
                        pick(self.true_cate), pick(self.pseudo_cate))

    def with_pseudo_cate(self, labels) -> "TaskData":
        return TaskData(self.task_id, self.x, self.y, self.a, self.true_cate, labels)


@dataclass
class SynthTaskSpec:
    seed: int
    n: int
    d: int
    idx_c: list
    idx_o: list
    idx_tau: list
    w_p: list
    w_0: list
    w_1: list
    omega: float

    def cate(self, x: np.ndarray) -> np.ndarray:
        return x[:, self.idx_tau] @ np.asarray(self.w_1)

    def mu0(self, x: np.ndarray) -> np.ndarray:
        return x[:, self.idx_c + self.idx_o] @ np.asarray(self.w_0)

    def propensity_logit(self, x: np.ndarray) -> np.ndarray:
        return 3.0 * ((x[:, self.idx_c] ** 2) @ np.asarray(self.w_p) - self.omega)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SynthTaskSpec":
        return cls(**json.loads(text))


def generate_synth_task(seed: int, n: int = 10000, d: int = SYNTH_DIM,
                        task_id: str | None = None) -> tuple[TaskData, SynthTaskSpec]:
    """One heterogeneous task: confounders drive treatment, a disjoint subset drives the effect.

    Features, treatments and outcome noise come from independent substreams so
    treatment is independent of the noise given x.
    """
    if n < 50:
        raise ValueError("generate_synth_task: n must be >= 50")
    if d < 3 * SUBSET_SIZE:
        raise ValueError(f"generate_synth_task: d must be >= {3 * SUBSET_SIZE}")
    rs = substream(seed, "structure")
    perm = rs.permutation(d)[:3 * SUBSET_SIZE]
    idx_c, idx_o, idx_tau = (sorted(int(i) for i in perm[k * SUBSET_SIZE:(k + 1) * SUBSET_SIZE]) for k in range(3))
    w_p = rs.standard_normal(SUBSET_SIZE)
    w_0 = rs.standard_normal(2 * SUBSET_SIZE)
    w_1 = rs.standard_normal(SUBSET_SIZE)

    x = substream(seed, "features").standard_normal((n, d))
    score = (x[:, idx_c] ** 2) @ w_p
    omega = float(np.median(score))
    spec = SynthTaskSpec(int(seed), int(n), int(d), idx_c, idx_o, idx_tau,
                         [float(v) for v in w_p], [float(v) for v in w_0], [float(v) for v in w_1], omega)

    pi = expit(spec.propensity_logit(x))
    a = (substream(seed, "treatment").random(n) < pi).astype(np.int64)
    mu0 = spec.mu0(x)
    cate = spec.cate(x)
    noise = substream(seed, "noise").standard_normal((n, 2))
    y = np.where(a == 1, mu0 + cate + noise[:, 1], mu0 + noise[:, 0])
    task = TaskData(task_id or f"synth_{seed}", x, y, a, true_cate=cate)
    return task, spec


def task_path(data_dir, task_id: str) -> Path:
    return Path(data_dir) / f"{task_id}.csv"


def generate_synth_suite(n_tasks: int = 100, n_per_task: int = 10000, seed: int = 0,
                         out_dir=None, d: int = SYNTH_DIM) -> list[TaskData]:
    if n_tasks < 3:
        raise ValueError("generate_synth_suite: need at least 3 tasks")
    tasks, entries = [], []
    width = max(3, len(str(n_tasks - 1)))
    for i in range(n_tasks):
        task_seed = derive_seed(seed, "synth-task", i)
        tid = f"task_{i:0{width}d}"
        task, spec = generate_synth_task(task_seed, n_per_task, d, task_id=tid)
        tasks.append(task)
        entries.append({"task_id": tid, "file": f"{tid}.csv", "seed": task_seed})
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_task(task, task_path(out, tid))
            (out / f"{tid}.spec.json").write_text(spec.to_json())
    if out_dir is not None:
        manifest = {"generator": "synth", "seed": int(seed), "n_tasks": n_tasks,
                    "n_per_task": n_per_task, "d": d, "tasks": entries}
        (Path(out_dir) / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return tasks


def save_task(task: TaskData, path) -> None:
    cols = [task.x, task.y[:, None], task.a[:, None]]
    names = [f"x_{j}" for j in range(task.d)] + ["y", "a"]
    fmt = ["%.17g"] * (task.d + 1) + ["%d"]
    for name in ("true_cate", "pseudo_cate"):
        col = getattr(task, name)
        if col is not None:
            cols.append(col[:, None])
            names.append(name)
            fmt.append("%.17g")
    table = np.hstack([c.astype(np.float64) for c in cols])
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=",".join(names), comments="")


def load_task(path, task_id: str | None = None) -> TaskData:
    path = Path(path)
    task_id = task_id or path.stem
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TaskFormatError(f"{path}:1: empty file") from None
        header = [h.strip() for h in header]
        for required in ("y", "a"):
            if required not in header:
                raise TaskFormatError(f"{path}:1: missing required column {required!r}")
        xcols = [h for h in header if h.startswith("x_")]
        if not xcols:
            raise TaskFormatError(f"{path}:1: no feature columns (x_0, x_1, ...)")
        expected = [f"x_{j}" for j in range(len(xcols))]
        if xcols != expected:
            raise TaskFormatError(f"{path}:1: feature columns must be {expected[0]}..{expected[-1]} in order")
        known = set(expected) | {"y", "a", "true_cate", "pseudo_cate"}
        unknown = [h for h in header if h not in known]
        if unknown:
            raise TaskFormatError(f"{path}:1: unknown columns {unknown}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TaskFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise TaskFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise TaskFormatError(f"{path}:{lineno}: non-finite value")
            a = vals[header.index("a")]
            if a not in (0.0, 1.0):
                raise TaskFormatError(f"{path}:{lineno}: treatment must be 0 or 1, got {row[header.index('a')]}")
            rows.append(vals)
    if not rows:
        raise TaskFormatError(f"{path}: no data rows")
    table = np.array(rows)
    col = lambda name: table[:, header.index(name)] if name in header else None  # noqa: E731
    return TaskData(task_id, table[:, [header.index(c) for c in expected]], col("y"),
                    col("a").astype(np.int64), col("true_cate"), col("pseudo_cate"))


def list_task_ids(data_dir) -> list[str]:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if manifest.exists():
        return [e["task_id"] for e in json.loads(manifest.read_text())["tasks"]]
    return sorted(p.stem for p in data_dir.glob("*.csv") if not p.name.endswith(".labels.csv"))


def load_tasks(data_dir, task_ids=None) -> list[TaskData]:
    ids = list_task_ids(data_dir) if task_ids is None else list(task_ids)
    return [load_task(task_path(data_dir, tid), tid) for tid in ids]


def load_spec(data_dir, task_id: str) -> SynthTaskSpec:
    return SynthTaskSpec.from_json((Path(data_dir) / f"{task_id}.spec.json").read_text())


def split_sizes(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Validation and test sizes round down, the remainder goes to training."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise SplitError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_val = math.floor(round(fractions[1] * n, 9))
    n_test = math.floor(round(fractions[2] * n, 9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f"{n} tasks are too few for a {fractions} split")
    return n_train, n_val, n_test


def split_tasks(tasks: list, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    n_train, n_val, _ = split_sizes(len(tasks), fractions)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(tasks))
    picked = [tasks[i] for i in order]
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]
