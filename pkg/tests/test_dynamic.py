import hashlib

import numpy as np
import pytest

from proxens import data, dynamic, ensemble as en, synthetic
from proxens.errors import DegenerateColumnError

SPECS = [("ridge", {}), ("knn", {"k": 3})]


@pytest.fixture(scope="module")
def walk():
    prep = data.prepare(synthetic.random_walk(length=300, seed=2), window=4, cumsum_columns=[])
    cfg = en.EnsembleConfig(epsilon=0.05, alpha=0.5)
    ens = en.ProximityEnsemble(SPECS, cfg, seed=0).fit(prep.dataset)
    initial = prep.processed.head(prep.dataset.n_train + prep.dataset.window)
    return prep, ens, initial


def run(walk, horizon, **kw):
    prep, ens, initial = walk
    return dynamic.dynamic_forecast(initial, ens.bank, ens.proximity_set("test"), ens.config, horizon, **kw)


def test_output_length(walk):
    preds, state = run(walk, 7)
    assert preds.shape == (7, 2)
    assert len(state.log) == 7 and state.step == 7
    assert len(state.history) == walk[2].T + 7


def test_first_step_matches_static_prediction(walk):
    prep, ens, initial = walk
    preds, state = run(walk, 1)
    j = prep.dataset.n_train  # its window is the last w rows of ``initial``
    static, diag = en.predict_ensemble(ens.bank, ens.proximity_set("test"), prep.dataset.windows[j], ens.config)
    assert np.array_equal(state.log[0].prediction_scaled, static)
    assert np.array_equal(preds[0], data.inverse_scale(static, prep.scaler))
    assert state.log[0].qualified_count == diag.qualified_count


def test_scaler_monotone(walk):
    _, state = run(walk, 25)
    lo = np.stack([r.x_min for r in state.log])
    hi = np.stack([r.x_max for r in state.log])
    assert np.all(np.diff(lo, axis=0) <= 0) and np.all(np.diff(hi, axis=0) >= 0)


def test_steps_only_see_the_past(walk):
    initial = walk[2]
    long_preds, state = run(walk, 10)
    short_preds, _ = run(walk, 4)
    assert np.array_equal(long_preds[:4], short_preds)
    history = np.array(initial.values)
    for rec, pred in zip(state.log, long_preds):
        assert rec.input_digest == hashlib.sha256(np.ascontiguousarray(history).tobytes()).hexdigest()[:16]
        history = np.vstack([history, pred])


def test_backtest_appends_actuals(walk):
    prep, _, initial = walk
    actual = prep.processed.values[initial.T: initial.T + 5]
    _, state = run(walk, 5, actuals=actual)
    np.testing.assert_array_equal(state.history[-5:], actual)


def test_extrapolation_widens_scaler():
    t = np.arange(120.0)
    series = data.RawSeries(np.column_stack([t, 2 * t]), t, ("a", "b"))
    prep = data.prepare(series, window=3, cumsum_columns=[])
    cfg = en.EnsembleConfig(epsilon=1e-9)  # force the machine-mean fallback
    ens = en.ProximityEnsemble([("ridge", {"lam": 1e-8})], cfg).fit(prep.dataset)
    preds, state = dynamic.dynamic_forecast(series, ens.bank, ens.proximity_set("test"), cfg, 4)
    for prev, nxt, pred in zip(state.log, state.log[1:], preds):
        assert np.all(pred > prev.x_max)
        assert np.all(nxt.x_max > prev.x_max)


def test_constant_history_is_degenerate():
    series = data.RawSeries(np.full((30, 1), 4.0), np.arange(30), ("flat",))
    windows = np.full((5, 1, 3), 0.5)
    ds = data.FrameDataset(windows, np.full((5, 1), 0.5), np.arange(5), np.arange(5), ("flat",), 5, 0, 0)
    ens = en.ProximityEnsemble([("knn", {"k": 1})], en.EnsembleConfig(epsilon=0.1)).fit(ds)
    with pytest.raises(DegenerateColumnError) as info:
        dynamic.dynamic_forecast(series, ens.bank, ens.proximity_set("tune"), ens.config, 3)
    assert info.value.step == 1 and info.value.column == "flat"


def test_refit_every(walk):
    prep, ens, initial = walk
    cfg = ens.config
    bank = en.MachineBank.from_specs(SPECS).fit(
        prep.dataset.windows[: prep.dataset.n_train], prep.dataset.targets[: prep.dataset.n_train])
    prox = en.build_proximity_set(bank, prep.dataset, cfg, "test")
    preds, state = dynamic.dynamic_forecast(initial, bank, prox, cfg, 6, refit_every=3)
    assert preds.shape == (6, 2)
    assert np.all(np.isfinite(preds))


def test_invalid_arguments(walk):
    with pytest.raises(ValueError):
        run(walk, 0)
    with pytest.raises(ValueError):
        run(walk, 3, actuals=np.zeros((2, 2)))


# ---------------------------------------------------------------- log file


def test_log_round_trip(walk, tmp_path):
    _, state = run(walk, 3)
    path = tmp_path / "dyn.csv"
    dynamic.export_dynamic_log(state, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    back = dynamic.read_dynamic_log(path)
    np.testing.assert_array_equal(back["step"], [1, 2, 3])
    for j, name in enumerate(state.column_names):
        np.testing.assert_allclose(back[f"pred_{name}"], state.predictions[:, j], rtol=0, atol=1e-9)
        np.testing.assert_allclose(back[f"min_{name}"], [r.x_min[j] for r in state.log], rtol=0, atol=1e-9)
        np.testing.assert_allclose(back[f"max_{name}"], [r.x_max[j] for r in state.log], rtol=0, atol=1e-9)


def test_empty_log_header_only(tmp_path):
    state = dynamic.DynamicState(np.zeros((3, 1)), ("x",))
    dynamic.export_dynamic_log(state, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == ["step,pred_x,min_x,max_x,qualified_count,fallback"]
    assert dynamic.read_dynamic_log(tmp_path / "e.csv")["step"].shape == (0,)
