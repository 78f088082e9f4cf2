import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autolambda.experiment import build_family, run
from autolambda.grouping import (
    BudgetExceeded,
    RelationshipMatrix,
    all_subsets,
    best_groupings,
    grouping_search,
    rank_agreement,
    relationship_matrix,
    write_grouping_csv,
    write_relationship_csv,
)
from autolambda.metrics import MetricTable, ZeroBaseline, delta_mtl
from conftest import small_config

BASE = MetricTable(["mIoU", "aErr", "mDist"], [43.37, 52.24, 22.40], [False, True, True])


def row(vals):
    return MetricTable(BASE.names, vals, BASE.lower_is_better)


def test_delta_identical_is_zero():
    assert delta_mtl(BASE, BASE) == 0.0


@pytest.mark.parametrize("vals,expected", [
    ((47.17, 40.97, 23.68), 8.21),
    ((45.98, 41.26, 24.09), 6.50),
])
def test_delta_reference_rows(vals, expected):
    assert abs(delta_mtl(row(vals), BASE) - expected) <= 0.01


def test_delta_oracle_formula():
    m = (47.17, 40.97, 23.68)
    signs = [1, -1, -1]
    ref = 100 * np.mean([s * (a - b) / b for s, a, b in zip(signs, m, BASE.values)])
    assert delta_mtl(row(m), BASE) == pytest.approx(ref, rel=1e-14)


def test_delta_errors():
    with pytest.raises(ZeroBaseline):
        delta_mtl(row((1, 1, 1)), row((0, 1, 1)))
    with pytest.raises(ValueError):
        delta_mtl(MetricTable(["a"], [1.0], [True]), MetricTable(["b"], [1.0], [True]))
    with pytest.raises(ValueError):
        MetricTable(["a"], [1.0, 2.0], [True])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 100), st.floats(1.01, 5), st.booleans())
def test_delta_sign_flips_on_role_swap(b, ratio, lower):
    # one metric: m = b * r vs b; swapping roles with the reciprocal ratio flips the sign
    up = delta_mtl(MetricTable(["t"], [b * ratio], [lower]), MetricTable(["t"], [b], [lower]))
    down = delta_mtl(MetricTable(["t"], [b], [lower]), MetricTable(["t"], [b * ratio], [lower]))
    assert np.sign(up) == -np.sign(down)
    assert up == pytest.approx(-down * ratio, rel=1e-9)


def test_metric_table_round_trip():
    assert MetricTable.from_dict(BASE.to_dict()) == BASE
    assert BASE.subset([2]).names == ("mDist",)
    assert BASE.directions == [0, 1, 1]


def test_evaluate_initial_net(small_cfg):
    log = run(small_cfg.replace(**{"training.steps": 0, "strategy.kind": "equal"}))
    # zero-initialised heads predict 0, so the test mse is the mean squared target
    fam = build_family(small_cfg)
    for t in range(2):
        y = fam.targets["test"][t]
        assert log.final.values[t] == pytest.approx(float(np.mean(y ** 2)), rel=1e-12)


def test_all_subsets_count_and_order():
    s = all_subsets(3)
    assert len(s) == 7
    assert s[0] == (0,) and s[2] == (0, 1) and s[-1] == (0, 1, 2)


def grouping_cfg():
    return small_config(**{
        "family.num_tasks": 3,
        "family.rho": [[1, 0.75, 0], [0.75, 1, 0], [0, 0, 1]],
        "family.n_train": 512,
        "family.input_dim": 12,
        "training.steps": 300,
        "training.batch_size": 32,
    })


@pytest.fixture(scope="module")
def grouping_results():
    cfg = grouping_cfg()
    fam = build_family(cfg)
    return fam, grouping_search(fam, cfg)


def test_grouping_k3_seven_results(grouping_results):
    fam, res = grouping_results
    assert len(res) == 7
    assert [r.bitmask for r in res] == list(range(1, 8))
    for r in res:
        assert set(r.metrics) == set(r.subset) == set(r.delta_pct)
        if len(r.subset) == 1:
            assert r.delta_pct[r.subset[0]] == 0.0


def test_grouping_deterministic(grouping_results):
    fam, res = grouping_results
    again = grouping_search(fam, grouping_cfg(), jobs=2)
    assert [r.metrics for r in again] == [r.metrics for r in res]


def test_best_grouping_follows_planted_overlap(grouping_results):
    fam, res = grouping_results
    for key in ("metrics", "val_loss"):
        best = best_groupings(res, fam, key)[0]
        assert 1 in best.subset and 2 not in best.subset


def test_grouping_k1_equals_single_task():
    cfg = small_config()
    fam = build_family(cfg).select([0])
    res = grouping_search(fam, cfg.replace(**{"family.num_tasks": 1, "family.rho": None}))
    assert len(res) == 1
    single = run(cfg.replace(**{"family.num_tasks": 1, "family.rho": None, "strategy.kind": "equal", "strategy.primary": [0]}), family=fam)
    assert res[0].metrics[0] == single.final.values[0]


def test_grouping_budget():
    cfg = small_config()
    with pytest.raises(BudgetExceeded):
        grouping_search(build_family(cfg), cfg, max_runs=2)
    with pytest.raises(BudgetExceeded):
        grouping_search(build_family(cfg), cfg, max_runs=5, seeds=3)


def test_grouping_csv(grouping_results, tmp_path):
    fam, res = grouping_results
    path = write_grouping_csv(res, fam, tmp_path / "g.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["subset_bitmask", "task", "metric", "delta_pct"]
    assert len(rows) == 1 + sum(len(r.subset) for r in res)


def test_relationship_matrix_shape_and_csv(tmp_path):
    cfg = small_config(**{"training.steps": 20})
    fam = build_family(cfg)
    mat = relationship_matrix(fam, cfg)
    assert mat.values.shape == (2, 2) and mat.names == ("task0", "task1")
    # row i is the converged weight vector of the run with primary {i}
    ref = run(cfg.replace(**{"strategy.primary": [1]}), family=fam).converged_lambda()
    np.testing.assert_array_equal(mat.values[1], ref)
    rows = list(csv.reader(open(write_relationship_csv(mat, tmp_path / "r.csv"))))
    assert rows[0] == ["primary_task", "task", "metric", "delta_pct"] and len(rows) == 5


def test_identical_tasks_give_symmetric_matrix():
    cfg = small_config(**{
        "family.rho": [[1, 1], [1, 1]],
        "family.noise_std": 0.0,
        "family.n_train": 512,
        "training.steps": 400,
        "training.batch_size": 32,
    })
    mat = relationship_matrix(build_family(cfg), cfg)
    assert abs(mat[0, 1] - mat[1, 0]) < 0.1


def test_rank_agreement():
    assert rank_agreement([3, 2, 1], [0.8, 0.4, 0.0]) == pytest.approx(1.0)
    assert rank_agreement([1, 2, 3], [0.8, 0.4, 0.0]) == pytest.approx(-1.0)
    assert isinstance(RelationshipMatrix(("a",), np.ones((1, 1)))[0, 0], float)
