"""``metacate`` command line: gen, label, train, eval and run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import generate_synth_suite, list_task_ids, load_tasks, split_tasks
from .episodic import TrainConfig, evaluate, meta_predictor, meta_train
from .errors import LabelingError, MetaCateError
from .evaluation import BaselineKind, baseline_predictor
from .experiment import ExperimentConfig, format_table, run_experiment, write_report
from .nn import load_checkpoint, save_checkpoint
from .pseudocate import LabelConfig, attach_labels, label_all_tasks, load_labels
from .seeding import derive_seed

log = logging.getLogger("metacate")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("METACATE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"METACATE_THREADS must be an integer, got {env!r}") from None
    return 1


def _data_dir(path) -> Path:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"data directory {d} does not exist")
    if not list_task_ids(d):
        raise UsageError(f"no task files in {d}")
    return d


def _per_arm(total: int, flag: str) -> int:
    if total < 2 or total % 2:
        raise UsageError(f"{flag} must be an even number >= 2 (split equally across arms), got {total}")
    return total // 2


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _labeled_tasks(data_dir: Path) -> list:
    """Tasks with their cached pseudo-CATE labels; labeling is a separate stage."""
    tasks = load_tasks(data_dir)
    labels = [load_labels(data_dir, t.task_id) for t in tasks]
    missing = [t.task_id for t, l in zip(tasks, labels) if l is None or l.values.size != t.n]
    if missing:
        raise UsageError(f"no pseudo-CATE labels for {', '.join(missing[:5])}"
                         f"{' ...' if len(missing) > 5 else ''}; run `metacate label` first")
    return attach_labels(tasks, labels)


# --- subcommands ----------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    if args.tasks < 3:
        raise UsageError("--tasks must be >= 3")
    if args.per_task < 50:
        raise UsageError("--per-task must be >= 50")
    generate_synth_suite(args.tasks, args.per_task, args.seed, out_dir=out)
    print(f"wrote {args.tasks} tasks to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    data_dir = _data_dir(args.data)
    tasks = load_tasks(data_dir)
    try:
        label_all_tasks(tasks, LabelConfig(), args.seed, data_dir, _threads(args))
    except LabelingError as exc:
        ids = getattr(exc, "task_ids", [])
        print(f"labeling failed for {len(ids)} task(s): {', '.join(ids)}", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    print(f"labels ready for {len(tasks)} tasks in {data_dir}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    overrides = {"learner": args.learner, "head_mode": args.head, "objective": args.objective,
                 "max_epochs": args.epochs, "seed": args.seed}
    if args.ns is not None:
        overrides["n_support"] = _per_arm(args.ns, "--ns")
    if args.nq is not None:
        overrides["n_query"] = _per_arm(args.nq, "--nq")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    data_dir = _data_dir(args.data)
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = _labeled_tasks(data_dir)
    train, val, test = split_tasks(tasks, seed=derive_seed(config.seed, "split"))
    if args.max_train_tasks:
        train = train[:args.max_train_tasks]
    split = {"train": [t.task_id for t in train], "val": [t.task_id for t in val],
             "test": [t.task_id for t in test]}
    _write_json(out / "config.json", {"train": asdict(config), "data": str(data_dir), "split": split})
    result = meta_train(train, val, config, log_path=out / "train_log.jsonl")
    meta = {"learner": config.learner, "head_mode": config.head_mode, "objective": config.objective,
            "best_epoch": result.best_epoch, "best_val": result.best_val, "init_val": result.init_val,
            "split": split, "seed": config.seed}
    save_checkpoint(result.params, out / "checkpoint.json", meta)
    print(f"best validation loss {result.best_val:.4f} at epoch {result.best_epoch} "
          f"(initial {result.init_val:.4f}); checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir = _data_dir(args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    params, meta = load_checkpoint(ckpt)
    ns = _per_arm(args.ns, "--ns")
    baselines = [b for b in (args.baselines or "").split(",") if b]
    for b in baselines:
        try:
            BaselineKind(b)
        except ValueError:
            raise UsageError(f"unknown baseline {b!r}; choose from mean, tl, sl") from None
    tasks = load_tasks(data_dir)
    if args.tasks == "test" and meta.get("split"):
        wanted = set(meta["split"]["test"])
        tasks = [t for t in tasks if t.task_id in wanted]
    if not tasks:
        raise MetaCateError("no tasks to evaluate")
    if tasks[0].d != params.in_dim:
        raise MetaCateError(f"checkpoint expects {params.in_dim} features, data has {tasks[0].d}")
    learner = meta.get("learner", "dr")
    name = args.name or learner
    runs = [evaluate(tasks, meta_predictor(params, learner, meta.get("head_mode")), ns, args.repeats,
                     args.seed, name)]
    runs += [evaluate(tasks, baseline_predictor(b), ns, args.repeats, args.seed, b) for b in baselines]

    raw = [{"method": s.method, "n_support": s.n_support, "split_repeat": 0, **v} for s in runs for v in s.values]
    summary = [{"method": s.method, "n_support": s.n_support, "mean": s.mean, "se": s.se,
                "count": len(s.values)} for s in runs]
    config = {"data": str(data_dir), "checkpoint": str(ckpt), "n_support": args.ns, "repeats": args.repeats,
              "seed": args.seed, "baselines": baselines, "tasks": [t.task_id for t in tasks]}
    write_report({"summary": summary, "raw": raw, "curves": {}}, args.out, config)
    print(format_table(summary))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        cfg = json.loads(path.read_text())
    if args.out:
        cfg["out_dir"] = args.out
    if args.data:
        cfg["data_dir"] = args.data
    cfg.setdefault("threads", _threads(args))
    try:
        config = ExperimentConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    result = run_experiment(config)
    write_report(result, config.out_dir, asdict(config))
    print(format_table(result["summary"]))
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metacate", description="Meta-learned CATE estimation from few samples.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic task suite")
    g.add_argument("--tasks", type=int, default=100)
    g.add_argument("--per-task", type=int, default=10000)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen)

    lab = sub.add_parser("label", help="fit pseudo-CATE labels for every task (cached)")
    lab.add_argument("--data", required=True)
    lab.add_argument("--seed", type=int, default=0)
    lab.add_argument("--threads", type=int, default=None, help="worker processes (default METACATE_THREADS or 1)")
    lab.set_defaults(func=cmd_label)

    t = sub.add_parser("train", help="meta-train shared parameters")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with training settings")
    t.add_argument("--out", required=True)
    t.add_argument("--learner", choices=["dr", "ra", "plugin"])
    t.add_argument("--head", choices=["linear", "gp"])
    t.add_argument("--objective", choices=["cate", "subproblem"])
    t.add_argument("--ns", type=int, help="support size N^s (split equally across arms)")
    t.add_argument("--nq", type=int, help="query size N^q (split equally across arms)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-train-tasks", type=int, help="cap on the meta-training pool")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PEHE of a checkpoint (and baselines) on test tasks")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--ns", type=int, default=6)
    e.add_argument("--repeats", type=int, default=30)
    e.add_argument("--out", required=True)
    e.add_argument("--baselines", default="", help="comma list from mean,tl,sl")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--tasks", choices=["test", "all"], default="test",
                   help="evaluate the checkpoint's test split (default) or every task")
    e.add_argument("--name", help="method name in the report (default: learner kind)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="full experiment from a JSON config")
    r.add_argument("--config")
    r.add_argument("--data")
    r.add_argument("--out")
    r.add_argument("--threads", type=int, default=None)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"metacate {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MetaCateError, OSError, ValueError, RuntimeError) as exc:
        print(f"metacate {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
