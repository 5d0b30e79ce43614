"""End-to-end comparisons: split, meta-train, evaluate against baselines on paired episodes.

A report directory holds::

    summary.csv        method, n_support, mean, se, count
    raw.csv            one PEHE per (method, n_support, split repeat, task, eval repeat)
    curves/*.csv       x, mean, se for the task-count and sample-size sweeps
    config.json        the effective configuration
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import generate_synth_suite, list_task_ids, load_tasks, split_tasks
from .episodic import TrainConfig, evaluate, meta_predictor, meta_train
from .evaluation import PeheSummary, baseline_predictor
from .pseudocate import LabelConfig, attach_labels, label_all_tasks
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class MethodSpec:
    name: str
    learner: str = "dr"
    head_mode: str = "linear"
    objective: str = "cate"


DEFAULT_METHODS = [
    MethodSpec("ours"),
    MethodSpec("dr-cfs", objective="subproblem"),
    MethodSpec("ra", learner="ra"),
    MethodSpec("plugin", learner="plugin"),
    MethodSpec("gp", head_mode="gp"),
]


@dataclass
class ExperimentConfig:
    data_dir: str = "data/synth"
    out_dir: str = "reports/synth"
    seed: int = 0
    # data; generated when data_dir holds no tasks
    n_tasks: int = 72
    n_per_task: int = 2000
    max_train_tasks: int | None = 50
    # protocol
    n_repeats: int = 3  # outer repeats, each with its own split and training seed
    eval_repeats: int = 3  # support draws per test task
    n_support: list = field(default_factory=lambda: [3])  # per arm
    n_query: int = 20  # per arm
    methods: list = field(default_factory=lambda: [asdict(m) for m in DEFAULT_METHODS])
    baselines: list = field(default_factory=lambda: ["mean", "tl", "sl"])
    task_counts: list = field(default_factory=list)  # sweep for the first method
    # meta-training overrides
    max_epochs: int = 5000
    val_interval: int = 10
    patience: int = 50
    batch_size: int = 32
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if not k.startswith("_")}  # "_comment" and the like
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


def prepare_tasks(config: ExperimentConfig, label_config: LabelConfig = LabelConfig()) -> list:
    data_dir = Path(config.data_dir)
    if not data_dir.exists() or not list_task_ids(data_dir):
        log.info("generating %d tasks in %s", config.n_tasks, data_dir)
        generate_synth_suite(config.n_tasks, config.n_per_task, config.seed, out_dir=data_dir)
    tasks = load_tasks(data_dir)
    labels = label_all_tasks(tasks, label_config, config.seed, data_dir, config.threads)
    return attach_labels(tasks, labels)


def _train_config(config: ExperimentConfig, method: MethodSpec, n_support: int, seed: int) -> TrainConfig:
    return TrainConfig(learner=method.learner, head_mode=method.head_mode, objective=method.objective,
                       n_support=n_support, n_query=config.n_query, batch_size=config.batch_size,
                       max_epochs=config.max_epochs, val_interval=config.val_interval,
                       patience=config.patience, seed=seed)


def _summarize(name: str, n_support: int, values: list) -> dict:
    p = np.array([v["pehe"] for v in values])
    se = float(p.std(ddof=1) / math.sqrt(p.size)) if p.size > 1 else 0.0
    return {"method": name, "n_support": n_support, "mean": float(p.mean()), "se": se, "count": int(p.size)}


def run_experiment(config: ExperimentConfig, tasks: list | None = None) -> dict:
    """Run every method and baseline; returns {"summary": rows, "raw": rows, "curves": {...}}.

    Within a split repeat every method is evaluated with the same evaluation seed,
    so they all see identical support draws.
    """
    methods = [m if isinstance(m, MethodSpec) else MethodSpec(**m) for m in config.methods]
    if tasks is None:
        tasks = prepare_tasks(config)
    raw, sweep = [], {}
    for r in range(config.n_repeats):
        train, val, test = split_tasks(tasks, seed=derive_seed(config.seed, "split", r))
        if config.max_train_tasks is not None:
            train = train[:config.max_train_tasks]
        train_seed = derive_seed(config.seed, "train", r)
        eval_seed = derive_seed(config.seed, "eval", r)

        def record(name, ns, summary: PeheSummary):
            for v in summary.values:
                raw.append({"method": name, "n_support": ns, "split_repeat": r, **v})

        main = None
        for ns in config.n_support:
            for m in methods:
                try:
                    res = meta_train(train, val, _train_config(config, m, ns, train_seed))
                except Exception as exc:
                    raise RuntimeError(f"meta-training {m.name} (repeat {r}, N^s={2 * ns}): {exc}") from exc
                summary = evaluate(test, meta_predictor(res.params, m.learner, m.head_mode), ns,
                                   config.eval_repeats, eval_seed, m.name)
                log.info("repeat %d %s", r, summary)
                record(m.name, 2 * ns, summary)
                if main is None:
                    main = summary
            for b in config.baselines:
                record(b, 2 * ns, evaluate(test, baseline_predictor(b), ns, config.eval_repeats, eval_seed, b))

        ns, m = config.n_support[0], methods[0]
        for count in config.task_counts:
            if count > len(train):
                raise ValueError(f"task-count sweep asks for {count} tasks, only {len(train)} available")
            if count == len(train) and main is not None:
                sweep.setdefault(count, []).extend(main.values)  # same run as the main table
                continue
            res = meta_train(train[:count], val, _train_config(config, m, ns, train_seed))
            summary = evaluate(test, meta_predictor(res.params, m.learner, m.head_mode), ns,
                               config.eval_repeats, eval_seed, m.name)
            sweep.setdefault(count, []).extend(summary.values)

    groups = {}
    for row in raw:
        groups.setdefault((row["method"], row["n_support"]), []).append(row)
    summary = [_summarize(name, ns, vals) for (name, ns), vals in groups.items()]
    curves = {"task_count": [{"x": c, **_point(v)} for c, v in sorted(sweep.items())]}
    for name in {row["method"] for row in summary}:
        pts = [{"x": s["n_support"], "mean": s["mean"], "se": s["se"]} for s in summary if s["method"] == name]
        curves[f"n_support_{name}"] = sorted(pts, key=lambda p: p["x"])
    return {"summary": summary, "raw": raw, "curves": curves}


def _point(values: list) -> dict:
    s = _summarize("", 0, values)
    return {"mean": s["mean"], "se": s["se"]}


def _write_csv(path: Path, rows: list, columns: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in columns})


def write_report(result: dict, out_dir, config: dict) -> Path:
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", result["summary"], ["method", "n_support", "mean", "se", "count"])
    _write_csv(out / "raw.csv", result["raw"], ["method", "n_support", "split_repeat", "task_id", "repeat", "pehe"])
    for name, pts in result["curves"].items():
        if pts:
            _write_csv(out / "curves" / f"{name}.csv", pts, ["x", "mean", "se"])
    (out / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    return out


def summary_from_raw(path) -> list:
    """Recompute summary rows from a raw.csv file."""
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["method"], int(row["n_support"]))
            groups.setdefault(key, []).append({"pehe": float(row["pehe"])})
    return [_summarize(m, ns, v) for (m, ns), v in groups.items()]


def format_table(summary: list) -> str:
    sizes = sorted({s["n_support"] for s in summary})
    methods = list(dict.fromkeys(s["method"] for s in summary))
    cell = {(s["method"], s["n_support"]): s for s in summary}
    lines = ["method".ljust(10) + "".join(f"N^s={n}".rjust(18) for n in sizes)]
    for m in methods:
        parts = []
        for n in sizes:
            s = cell.get((m, n))
            parts.append((f"{s['mean']:.3f} +/- {s['se']:.3f}" if s else "-").rjust(18))
        lines.append(m.ljust(10) + "".join(parts))
    return "\n".join(lines)
