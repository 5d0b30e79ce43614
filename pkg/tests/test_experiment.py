import csv

import numpy as np
import pytest

from metacate import experiment as ex
from metacate.data import generate_synth_suite
from metacate.pseudocate import LabelConfig, attach_labels, label_all_tasks


@pytest.fixture(scope="module")
def tasks():
    ts = generate_synth_suite(10, 150, seed=2)
    return attach_labels(ts, label_all_tasks(ts, LabelConfig(max_epochs=20, patience=3), seed=2))


def small_config(tmp_path, **kw):
    base = dict(data_dir=str(tmp_path / "d"), out_dir=str(tmp_path / "r"), n_repeats=2, eval_repeats=2,
                n_support=[3, 5], max_train_tasks=None, max_epochs=4, batch_size=4, val_interval=2, patience=2,
                methods=[{"name": "ours"}, {"name": "plugin", "learner": "plugin"}], baselines=["mean", "sl"])
    base.update(kw)
    return ex.ExperimentConfig(**base)


def test_report_layout_and_recompute(tasks, tmp_path):
    cfg = small_config(tmp_path, task_counts=[3, 7])
    result = ex.run_experiment(cfg, tasks)
    out = ex.write_report(result, cfg.out_dir, {"note": "test"})
    rows = list(csv.DictReader(open(out / "summary.csv")))
    # one row per method and support size: two support sizes give two table columns
    assert {(r["method"], r["n_support"]) for r in rows} == \
        {(m, s) for m in ("ours", "plugin", "mean", "sl") for s in ("6", "10")}
    recomputed = {(r["method"], r["n_support"]): r for r in ex.summary_from_raw(out / "raw.csv")}
    for r in rows:
        again = recomputed[(r["method"], int(r["n_support"]))]
        assert float(r["mean"]) == again["mean"] and float(r["se"]) == again["se"]
        assert int(r["count"]) == 2 * 2 * 2  # repeats x test tasks x eval repeats
    curve = list(csv.DictReader(open(out / "curves" / "task_count.csv")))
    assert [c["x"] for c in curve] == ["3", "7"]
    assert (out / "curves" / "n_support_ours.csv").exists() and (out / "config.json").exists()
    print(ex.format_table(result["summary"]))


def test_methods_see_identical_supports(tasks, tmp_path, monkeypatch):
    seen = {}
    real = ex.evaluate

    def spy(test_tasks, predictor, ns, repeats, seed, method):
        def wrapped(support, xq):
            seen.setdefault(method, []).append(support.x.copy())
            return predictor(support, xq)
        return real(test_tasks, wrapped, ns, repeats, seed, method)

    monkeypatch.setattr(ex, "evaluate", spy)
    ex.run_experiment(small_config(tmp_path, n_support=[3]), tasks)
    ref = seen["ours"]
    for method, supports in seen.items():
        assert len(supports) == len(ref)
        for a, b in zip(supports, ref):
            np.testing.assert_array_equal(a, b)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"n_task": 3})


def test_sweep_larger_than_pool(tasks, tmp_path):
    with pytest.raises(ValueError, match="sweep"):
        ex.run_experiment(small_config(tmp_path, n_repeats=1, task_counts=[99], n_support=[3]), tasks)
