import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from metacate.data import (TaskData, generate_synth_suite, generate_synth_task, list_task_ids,
                           load_spec, load_task, load_tasks, save_task, split_sizes, split_tasks)
from metacate.errors import SplitError, TaskFormatError
from metacate.seeding import derive_seed


@pytest.fixture(scope="module")
def big_task():
    return generate_synth_task(123, n=10000)


def test_treated_fraction_near_half(big_task):
    task, _ = big_task
    assert 0.40 <= task.a.mean() <= 0.60


def test_positivity(big_task):
    task, spec = big_task
    logit = spec.propensity_logit(task.x)
    # sigmoid(l) and 1 - sigmoid(l) = sigmoid(-l) are both strictly positive
    assert np.all(expit(logit) > 0) and np.all(expit(-logit) > 0)


def test_structure_of_spec(big_task):
    task, spec = big_task
    sets = [set(spec.idx_c), set(spec.idx_o), set(spec.idx_tau)]
    assert all(len(s) == 5 for s in sets)
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert len(spec.w_0) == 10 and len(spec.w_p) == 5 and len(spec.w_1) == 5
    assert spec.omega == pytest.approx(np.median((task.x[:, spec.idx_c] ** 2) @ spec.w_p))


def test_cate_zero_where_effect_features_vanish(big_task):
    task, spec = big_task
    x = task.x[:3].copy()
    x[:, spec.idx_tau] = 0.0
    np.testing.assert_array_equal(spec.cate(x), 0.0)


def test_generation_deterministic():
    t1, s1 = generate_synth_task(5, n=200)
    t2, s2 = generate_synth_task(5, n=200)
    for col in ("x", "y", "a", "true_cate"):
        np.testing.assert_array_equal(getattr(t1, col), getattr(t2, col))
    assert s1 == s2


def test_noise_stream_independent_of_treatment_stream():
    # the treatment draw uses its own substream: outcomes differ only by noise seeds
    t, spec = generate_synth_task(9, n=500)
    resid = t.y - spec.mu0(t.x) - t.a * spec.cate(t.x)
    assert abs(np.corrcoef(resid, t.a)[0, 1]) < 0.15
    assert abs(resid.std() - 1.0) < 0.1


def test_suite_files_and_regeneration(tmp_path):
    tasks = generate_synth_suite(4, 120, seed=3, out_dir=tmp_path)
    assert list_task_ids(tmp_path) == [t.task_id for t in tasks]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["tasks"]) == 4
    assert manifest["tasks"][1]["seed"] == derive_seed(3, "synth-task", 1)
    loaded = load_tasks(tmp_path)
    for t, l in zip(tasks, loaded):
        spec = load_spec(tmp_path, t.task_id)
        assert np.abs(spec.cate(l.x) - l.true_cate).max() <= 1e-12
        np.testing.assert_array_equal(t.y, l.y)
    assert not np.array_equal(load_spec(tmp_path, tasks[0].task_id).w_1,
                              load_spec(tmp_path, tasks[1].task_id).w_1)


def test_generator_preconditions():
    with pytest.raises(ValueError):
        generate_synth_task(0, n=10)
    with pytest.raises(ValueError):
        generate_synth_suite(2, 100)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**40), n=st.integers(10, 40), with_pseudo=st.booleans())
def test_task_roundtrip(tmp_path_factory, seed, n, with_pseudo):
    rng = np.random.default_rng(seed)
    a = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    task = TaskData("t", rng.standard_normal((n, 3)) * 1e3, rng.standard_normal(n) / 7, a,
                    true_cate=rng.standard_normal(n),
                    pseudo_cate=rng.standard_normal(n) if with_pseudo else None)
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    save_task(task, path)
    back = load_task(path)
    for col in ("x", "y", "a", "true_cate"):
        np.testing.assert_array_equal(getattr(back, col), getattr(task, col))
    if with_pseudo:
        np.testing.assert_array_equal(back.pseudo_cate, task.pseudo_cate)
    else:
        assert back.pseudo_cate is None


def write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


def test_schema_errors(tmp_path):
    with pytest.raises(TaskFormatError, match="'a'"):
        load_task(write(tmp_path, "x_0,y\n1,2\n"))
    with pytest.raises(TaskFormatError, match=":3:"):
        load_task(write(tmp_path, "x_0,y,a\n1,2,0\n1,2,2\n"))
    with pytest.raises(TaskFormatError, match=":2:"):
        load_task(write(tmp_path, "x_0,y,a\n1,oops,0\n"))
    with pytest.raises(TaskFormatError, match=":3:"):
        load_task(write(tmp_path, "x_0,y,a\n1,2,0\n1,2\n"))
    with pytest.raises(TaskFormatError):
        load_task(write(tmp_path, ""))
    with pytest.raises(TaskFormatError):
        load_task(write(tmp_path, "x_1,y,a\n1,2,0\n"))


def test_single_arm_task_rejected(tmp_path):
    with pytest.raises(TaskFormatError):
        load_task(write(tmp_path, "x_0,y,a\n1,2,1\n3,4,1\n"))
    with pytest.raises(TaskFormatError):
        TaskData("t", np.zeros((3, 1)), np.zeros(3), [0, 0, 0])


@pytest.mark.parametrize("n,expected", [(100, (70, 10, 20)), (10, (7, 1, 2)), (72, (51, 7, 14))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


def test_split_partition_and_determinism():
    tasks = [generate_synth_task(i, n=60)[0] for i in range(10)]
    tr, va, te = split_tasks(tasks, seed=4)
    ids = [t.task_id for t in tr + va + te]
    assert sorted(ids) == sorted(t.task_id for t in tasks) and len(set(ids)) == 10
    assert [t.task_id for t in split_tasks(tasks, seed=4)[0]] == [t.task_id for t in tr]
    assert [t.task_id for t in split_tasks(tasks, seed=5)[0]] != [t.task_id for t in tr]


def test_split_errors():
    with pytest.raises(SplitError):
        split_sizes(3)
    with pytest.raises(SplitError):
        split_sizes(10, (0.5, 0.5, 0.5))
