"""Error metrics, model comparison statistics and sensitivity sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateTestError

EXACT_MAX_N = 25


def _pair(actual, predicted):
    y = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, p


def rmse(actual, predicted):
    y, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def mape(actual, predicted):
    """Mean absolute percentage error in percent; zero actuals are an error."""
    y, p = _pair(actual, predicted)
    if np.any(y == 0):
        raise ZeroDivisionError("MAPE undefined: actual series contains zeros")
    return float(100.0 * np.mean(np.abs(y - p) / np.abs(y)))


def per_dimension(metric, actual, predicted):
    """(per-column values, their mean) for a (K, N) pair of matrices."""
    y, p = _pair(actual, predicted)
    if y.ndim == 1:
        v = metric(y, p)
        return [v], v
    values = [metric(y[:, j], p[:, j]) for j in range(y.shape[1])]
    return values, float(np.mean(values))


# ------------------------------------------------------------ Wilcoxon


def signed_rank_null_counts(doubled_ranks):
    """Number of sign assignments giving each doubled positive-rank sum.

    Ranks are doubled so midranks stay integral; entry ``s`` counts the
    subsets of ranks whose doubled sum is ``s``.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r: top + r + 1] = counts[r: top + r + 1] + counts[: top + 1]
        top += r
    return counts


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def wilcoxon_signed_rank(a, b):
    """Two-sided paired signed-rank test.

    Zero differences are dropped. With at most 25 nonzero pairs the p-value
    comes from the exact null distribution (midranks for ties), otherwise
    from the tie-corrected normal approximation with continuity correction.
    The statistic is min(W+, W-).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    if len(a) < 5:
        raise ValueError("need at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2
    stat = min(w_plus, total - w_plus)
    if n <= EXACT_MAX_N:
        counts = signed_rank_null_counts(2 * ranks)
        k = int(round(2 * w_plus))
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        p = 2 * min(lower, upper) / 2**n
        return WilcoxonResult(stat, float(min(1.0, p)), n, "exact")
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_sizes**3 - tie_sizes) / 48
    z = (abs(w_plus - total / 2) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return WilcoxonResult(stat, float(min(1.0, p)), n, "normal")


# ------------------------------------------------------------ ranks & reports


def average_ranks(metric_matrix):
    """Mean per-dataset rank of each model (1 = lowest metric, ties midranked)."""
    m = np.asarray(metric_matrix, dtype=float)
    if m.ndim != 2 or np.any(np.isnan(m)):
        raise ValueError("metric matrix must be 2-D without missing cells")
    return rankdata(m, axis=1).mean(axis=0)


@dataclass
class ForecastRun:
    model: str
    dataset: str
    actual: np.ndarray
    predicted: np.ndarray
    actual_raw: np.ndarray | None = None
    predicted_raw: np.ndarray | None = None
    fallback_count: int = 0
    column_names: tuple = ()

    def __post_init__(self):
        if len(self.actual) != len(self.predicted) or len(self.actual) < 1:
            raise ValueError("predictions and actuals must have equal length >= 1")

    def metrics(self, space="raw"):
        if space == "raw" and self.actual_raw is not None:
            y, p = self.actual_raw, self.predicted_raw
        else:
            y, p = self.actual, self.predicted
        out = {}
        per, out["rmse"] = per_dimension(rmse, y, p)
        out["rmse_per_dim"] = per
        try:
            per, out["mape"] = per_dimension(mape, y, p)
            out["mape_per_dim"] = per
        except ZeroDivisionError:
            out["mape"], out["mape_per_dim"] = math.nan, []
        out["fallback_rate"] = self.fallback_count / len(self.actual)
        return out


@dataclass
class ComparisonReport:
    models: list
    datasets: list
    matrix: np.ndarray
    metric: str
    ranks: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)
    reference: str | None = None

    def to_dict(self):
        return {
            "metric": self.metric,
            "reference": self.reference,
            "models": self.models,
            "datasets": self.datasets,
            "avg_rank": self.ranks,
            "pvalue": self.pvalues,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def compare_models(matrix, models, datasets, metric="rmse", reference="DPE"):
    """Average ranks for every model and Wilcoxon p-values against ``reference``.

    Columns with missing cells are left out of the ranking. A p-value is
    ``None`` when the test cannot run (fewer than 5 datasets or identical
    columns).
    """
    matrix = np.asarray(matrix, dtype=float)
    complete = [j for j in range(matrix.shape[1]) if not np.any(np.isnan(matrix[:, j]))]
    ranks = {}
    if complete:
        r = average_ranks(matrix[:, complete])
        ranks = {models[j]: float(v) for j, v in zip(complete, r)}
    pvalues = {}
    if reference in models:
        ref = models.index(reference)
        for j, name in enumerate(models):
            if j == ref:
                continue
            try:
                pvalues[name] = wilcoxon_signed_rank(matrix[:, ref], matrix[:, j]).pvalue
            except (ValueError, DegenerateTestError):
                pvalues[name] = None
    return ComparisonReport(list(models), list(datasets), matrix, metric, ranks, pvalues, reference)


def write_metric_matrix(path, matrix, models, datasets):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", *models])
        for name, row in zip(datasets, np.asarray(matrix, dtype=float)):
            w.writerow([name, *["" if math.isnan(v) else repr(float(v)) for v in row]])


def read_metric_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    models = rows[0][1:]
    datasets = [r[0] for r in rows[1:]]
    matrix = np.array([[float(v) if v else math.nan for v in r[1:]] for r in rows[1:]])
    return matrix.reshape(len(datasets), len(models)), models, datasets


# ------------------------------------------------------------ sweeps


@dataclass(frozen=True)
class SweepPoint:
    x: float
    mse: float
    mean_qualified_count: float
    fallback_rate: float


def _sweep(context, base_config, field_name, values):
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    rows = []
    for x in values:
        mse, mean_q, fallback = context.validation(base_config.replace(**{field_name: float(x)}))
        rows.append(SweepPoint(float(x), mse, mean_q, fallback))
    return rows


def sweep_alpha(context, config, alphas):
    """Validation MSE and consensus diagnostics along alpha, epsilon fixed.

    ``context`` is a :class:`proxens.hpo.TuningContext` for the variant.
    """
    return _sweep(context, config, "alpha", alphas)


def sweep_epsilon(context, config, epsilons):
    return _sweep(context, config, "epsilon", epsilons)


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "mse", "mean_qualified_count", "fallback_rate"])
        for r in rows:
            w.writerow([repr(r.x), repr(r.mse), repr(r.mean_qualified_count), repr(r.fallback_rate)])
