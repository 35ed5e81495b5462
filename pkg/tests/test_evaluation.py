import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from proxens import evaluation as ev
from proxens import hpo
from proxens.ensemble import EnsembleConfig
from proxens.errors import DegenerateTestError
from oracles import wilcoxon_enumeration

# ---------------------------------------------------------------- metrics


def test_rmse_examples():
    assert ev.rmse([1, 2], [1, 2]) == 0
    assert ev.rmse([3, 4], [0, 0]) == pytest.approx(3.535533906, abs=1e-9)
    assert ev.rmse([7.0], [7.25]) == 0.25


def test_mape_examples():
    assert ev.mape([2, 4], [1, 5]) == pytest.approx(37.5, abs=1e-9)
    assert ev.mape([2, 4], [2, 4]) == 0
    with pytest.raises(ZeroDivisionError):
        ev.mape([0, 1], [1, 1])


def test_metric_length_mismatch():
    with pytest.raises(ValueError):
        ev.rmse([1, 2], [1])


def test_per_dimension_mean():
    per, mean = ev.per_dimension(ev.rmse, [[0, 0], [0, 0]], [[1, 3], [1, 3]])
    assert per == [1.0, 3.0] and mean == 2.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-10, 10))
def test_rmse_of_constant_shift(y, e):
    assert ev.rmse(y, np.array(y) + e) == pytest.approx(abs(e), rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- wilcoxon


def test_uniform_signs_eight_datasets():
    a = np.arange(1, 9) * 0.1
    res = ev.wilcoxon_signed_rank(a, a + np.linspace(0.01, 0.08, 8))
    assert res.pvalue == 0.0078125 and res.statistic == 0 and res.method == "exact"


def test_balanced_signs():
    res = ev.wilcoxon_signed_rank([1, 2, 3, 4, 5], [2, 1, 3, 4, 5])
    assert res.n == 2 and res.pvalue == 1.0


def test_one_negative_smallest_rank():
    d = np.array([-1, 2, 3, 4, 5, 6], dtype=float)
    res = ev.wilcoxon_signed_rank(d, np.zeros(6))
    assert res.statistic == 1
    assert res.pvalue == pytest.approx(0.0625, abs=1e-15)


def test_degenerate_and_short():
    with pytest.raises(DegenerateTestError):
        ev.wilcoxon_signed_rank([1] * 6, [1] * 6)
    with pytest.raises(ValueError):
        ev.wilcoxon_signed_rank([1, 2, 3], [3, 2, 1])


@settings(max_examples=150, deadline=None)
@given(st.integers(5, 12).flatmap(
    lambda n: st.tuples(st.lists(st.integers(-4, 4), min_size=n, max_size=n),
                        st.lists(st.integers(-4, 4), min_size=n, max_size=n))))
def test_exact_matches_enumeration(pair):
    a, b = pair
    if all(x == y for x, y in zip(a, b)):
        return
    p, _ = wilcoxon_enumeration(a, b)
    assert ev.wilcoxon_signed_rank(a, b).pvalue == pytest.approx(p, rel=1e-12)


@pytest.mark.parametrize("n", [6, 10, 20])
def test_exact_matches_scipy_without_ties(rng, n):
    for _ in range(20):
        a, b = rng.normal(size=n), rng.normal(size=n)
        ours = ev.wilcoxon_signed_rank(a, b)
        ref = stats.wilcoxon(a, b, method="exact")
        assert ours.statistic == ref.statistic
        assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-10)


def test_normal_path_close_to_scipy(rng):
    a, b = rng.normal(size=60), rng.normal(size=60) + 0.2
    ours = ev.wilcoxon_signed_rank(a, b)
    ref = stats.wilcoxon(a, b, method="approx", correction=True)
    assert ours.method == "normal"
    assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-9)


def test_null_counts_total():
    counts = ev.signed_rank_null_counts(2 * np.arange(1, 11))
    assert sum(counts) == 2**10


# ---------------------------------------------------------------- ranks & reports


def test_average_ranks():
    np.testing.assert_array_equal(ev.average_ranks([[0.1, 0.2], [0.3, 0.5]]), [1.0, 2.0])
    np.testing.assert_array_equal(ev.average_ranks([[0.1, 0.1], [0.3, 0.5]]), [1.25, 1.75])


def test_compare_models_report(tmp_path):
    m = np.array([[0.1 * i, 0.1 * i + 0.05, 0.2] for i in range(1, 9)])
    rep = ev.compare_models(m, ["DPE", "knn", "ridge"], [f"d{i}" for i in range(8)])
    assert rep.ranks["DPE"] < rep.ranks["knn"]
    assert rep.pvalues["knn"] == 0.0078125
    rep.write_json(tmp_path / "c.json")
    assert '"reference": "DPE"' in (tmp_path / "c.json").read_text()


def test_compare_models_small_study_has_no_pvalues():
    rep = ev.compare_models([[0.1, 0.2]], ["DPE", "knn"], ["d"])
    assert rep.pvalues == {"knn": None}


def test_metric_matrix_round_trip(tmp_path):
    m = np.array([[0.1, math.nan], [1 / 3, 2.0]])
    ev.write_metric_matrix(tmp_path / "m.csv", m, ["a", "b"], ["x", "y"])
    back, models, datasets = ev.read_metric_matrix(tmp_path / "m.csv")
    assert models == ["a", "b"] and datasets == ["x", "y"]
    np.testing.assert_array_equal(back, m)


def test_forecast_run_nan_mape_on_zeros():
    run = ev.ForecastRun("m", "d", np.array([[0.0], [1.0]]), np.array([[0.1], [0.9]]))
    out = run.metrics("scaled")
    assert math.isnan(out["mape"]) and out["rmse"] == pytest.approx(0.1)


# ---------------------------------------------------------------- sweeps


@pytest.fixture(scope="module")
def context(sinusoid_prepared):
    specs = [("ridge", {}), ("ridge", {"lam": 0.1}), ("knn", {"k": 3}), ("knn", {"k": 7}), ("knn", {"k": 15})]
    return hpo.TuningContext(sinusoid_prepared.dataset, specs, "DPE")


def test_alpha_sweep_five_points(context, tmp_path):
    rows = ev.sweep_alpha(context, EnsembleConfig(epsilon=0.05), [k / 5 for k in range(1, 6)])
    assert len(rows) == 5
    # stricter consensus never qualifies more frames
    q = [r.mean_qualified_count for r in rows]
    assert all(x >= y for x, y in zip(q, q[1:]))
    ev.write_sweep_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x,mse,mean_qualified_count,fallback_rate" and len(lines) == 6


def test_epsilon_sweep_ten_points(context):
    rows = ev.sweep_epsilon(context, EnsembleConfig(epsilon=0.05), np.geomspace(1e-3, 1e-2, 10))
    assert len(rows) == 10
    q = [r.mean_qualified_count for r in rows]
    assert all(x <= y for x, y in zip(q, q[1:]))


def test_single_point_sweep(context):
    assert len(ev.sweep_epsilon(context, EnsembleConfig(epsilon=0.05), [0.02])) == 1
    with pytest.raises(ValueError):
        ev.sweep_epsilon(context, EnsembleConfig(epsilon=0.05), [])
