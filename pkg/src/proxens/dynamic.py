"""Multi-step forecasting by iterated one-step prediction under a refitted scaler.

Each step refits the min-max scaler on the whole history available so far
(initial rows plus everything appended), scales, forecasts the next row
from the last window, maps it back to raw units and appends it. Machines
are trained once under the original scaler, so later steps feed them data
scaled slightly differently; that approximation is inherent to the scheme.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import fit_min_max, inverse_scale, scale_values
from .ensemble import ProximitySet, predict_ensemble


@dataclass(frozen=True)
class StepRecord:
    step: int
    prediction_raw: np.ndarray
    prediction_scaled: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    qualified_count: int
    fallback: bool
    input_digest: str


@dataclass
class DynamicState:
    history: np.ndarray
    column_names: tuple
    scaler: object = None
    step: int = 0
    log: list = field(default_factory=list)

    @property
    def predictions(self):
        if not self.log:
            return np.empty((0, len(self.column_names)))
        return np.stack([r.prediction_raw for r in self.log])


def _digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def _refit(bank, scaled, window, seed):
    from .data import RawSeries, build_frames

    frames = build_frames(RawSeries(scaled, np.arange(len(scaled)), tuple(range(scaled.shape[1]))), window)
    bank.fit(frames.windows, frames.targets, seed=seed)
    preds = bank.predict_batch(frames.windows)
    return ProximitySet(preds, frames.targets, np.full(len(frames), "history"))


def dynamic_forecast(initial, bank, prox, config, horizon, window=None, actuals=None,
                     refit_every=0, seed=0):
    """Roll ``horizon`` one-step forecasts forward from ``initial``.

    Parameters
    ----------
    initial : RawSeries
        History in model input units (after any cumsum, before scaling).
    bank, prox, config
        Fitted machines, their proximity set and the ensemble configuration.
    horizon : int
    window : int, optional
        Frame width; defaults to the width the machines were trained on.
    actuals : array (horizon, N), optional
        Backtest mode: append these realized rows instead of the forecasts.
    refit_every : int
        Refit the machines (and rebuild the proximity set from the whole
        history) every this many steps; 0 never refits.

    Returns
    -------
    predictions : ndarray (horizon, N), raw units
    state : DynamicState
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    window = window or bank.machines[0].window_shape[1]
    if initial.T < window:
        raise ValueError(f"initial history of {initial.T} rows cannot fill a window of {window}")
    if actuals is not None:
        actuals = np.asarray(actuals, dtype=float)
        if actuals.shape != (horizon, initial.N):
            raise ValueError("actuals must be (horizon, N)")

    state = DynamicState(np.array(initial.values, dtype=float), initial.column_names)
    for k in range(horizon):
        step = k + 1
        scaler = fit_min_max(state.history, initial.column_names, step=step)
        scaled = scale_values(state.history, scaler)
        if refit_every and k > 0 and k % refit_every == 0:
            prox = _refit(bank, scaled, window, seed)
        frame = np.ascontiguousarray(scaled[-window:].T)
        pred_scaled, diag = predict_ensemble(bank, prox, frame, config)
        pred_raw = inverse_scale(pred_scaled, scaler)
        state.log.append(StepRecord(step, pred_raw, pred_scaled, scaler.x_min, scaler.x_max,
                                    diag.qualified_count, diag.fallback, _digest(state.history)))
        nxt = actuals[k] if actuals is not None else pred_raw
        state.history = np.vstack([state.history, nxt])
        state.scaler = scaler
        state.step = step
    return state.predictions, state


def export_dynamic_log(state, path):
    """CSV: step, raw prediction and scaler min/max per dimension, consensus info."""
    names = state.column_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *[f"pred_{c}" for c in names], *[f"min_{c}" for c in names],
                    *[f"max_{c}" for c in names], "qualified_count", "fallback"])
        for r in state.log:
            w.writerow([r.step, *map(repr, map(float, r.prediction_raw)), *map(repr, map(float, r.x_min)),
                        *map(repr, map(float, r.x_max)), r.qualified_count, int(r.fallback)])


def read_dynamic_log(path):
    """Inverse of :func:`export_dynamic_log`: dict of column -> ndarray."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows).reshape(len(rows), len(header))
    return {name: data[:, j] for j, name in enumerate(header)}
