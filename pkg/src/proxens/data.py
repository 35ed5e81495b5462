"""Series ingestion, preprocessing and sliding-window frame datasets.

Pipeline order is: load -> cumulative sum -> min-max scaling (fitted on the
rows touched by the training pairs) -> frames -> chronological split.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateColumnError,
    InsufficientDataError,
    OrderingError,
    ParseError,
    SplitError,
)

logger = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null", "none"}


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawSeries:
    """T x N block of observations with ordered timestamps."""

    values: np.ndarray
    timestamps: np.ndarray
    column_names: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError("values must be a T x N matrix")
        timestamps = np.asarray(self.timestamps)
        if len(timestamps) != values.shape[0]:
            raise ValueError("timestamps and values disagree on T")
        if len(self.column_names) != values.shape[1]:
            raise ValueError("column_names and values disagree on N")
        if values.shape[0] < 1:
            raise InsufficientDataError("empty series")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        if len(timestamps) > 1 and not np.all(timestamps[1:] > timestamps[:-1]):
            raise OrderingError("timestamps are not strictly increasing")
        object.__setattr__(self, "values", _frozen(values, float))
        object.__setattr__(self, "timestamps", _frozen(timestamps))
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def with_values(self, values):
        return RawSeries(values, self.timestamps, self.column_names)

    def head(self, rows):
        return RawSeries(self.values[:rows], self.timestamps[:rows], self.column_names)


def _parse_timestamp(text, line):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return np.datetime64(datetime.fromisoformat(text.replace("Z", "+00:00")).replace(tzinfo=None), "ns")
    except ValueError:
        raise ParseError(f"cannot parse timestamp {text!r}", line) from None


def load_csv(path, timestamp_column=None, feature_columns=None, drop_missing=True):
    """Read a headered CSV into a :class:`RawSeries`.

    Parameters
    ----------
    path : str or Path
    timestamp_column : str, optional
        Defaults to the first column.
    feature_columns : sequence of str, optional
        Defaults to every column except the timestamp.
    drop_missing : bool
        Drop rows with an empty/NA selected cell (with a warning). When False
        such rows raise :class:`ParseError`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        ts_col = timestamp_column or header[0]
        if ts_col not in header:
            raise ParseError(f"timestamp column {ts_col!r} not in header", 1)
        features = list(feature_columns) if feature_columns else [h for h in header if h != ts_col]
        missing_cols = [c for c in features if c not in header]
        if missing_cols:
            raise ParseError(f"columns not in header: {missing_cols}", 1)
        ts_idx = header.index(ts_col)
        idx = [header.index(c) for c in features]

        stamps, rows, dropped = [], [], 0
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(record)}", line_no)
            cells = [record[i].strip() for i in idx]
            if any(c.lower() in _MISSING for c in cells):
                if not drop_missing:
                    raise ParseError("missing value in a selected column", line_no)
                dropped += 1
                continue
            try:
                row = [float(c) for c in cells]
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise ParseError(f"non-numeric value {bad!r}", line_no) from None
            if not all(math.isfinite(v) for v in row):
                raise ParseError("non-finite value", line_no)
            stamps.append(_parse_timestamp(record[ts_idx], line_no))
            rows.append(row)
    if dropped:
        logger.warning("dropped %d rows with missing cells from %s", dropped, path)
    if len(rows) < 2:
        raise InsufficientDataError(f"{path} has fewer than 2 usable rows")
    kinds = {type(s) for s in stamps}
    if len(kinds) > 1:
        raise ParseError("timestamp column mixes epoch integers and ISO dates")
    stamps = np.array(stamps)
    bad = np.nonzero(stamps[1:] <= stamps[:-1])[0]
    if len(bad):
        raise OrderingError(f"timestamps not strictly increasing at data row {bad[0] + 2}")
    return RawSeries(np.array(rows), stamps, tuple(features))


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def cumsum(series, columns=None):
    """Replace ``columns`` (names; ``None`` = all) with running prefix sums."""
    if series.T == 0:
        raise InsufficientDataError("empty series")
    names = series.column_names if columns is None else list(columns)
    unknown = set(names) - set(series.column_names)
    if unknown:
        raise KeyError(f"unknown columns: {sorted(unknown)}")
    values = np.array(series.values)
    for name in names:
        j = series.column_names.index(name)
        values[:, j] = np.cumsum(values[:, j])
    return series.with_values(values)


def diff(series, columns=None):
    """Inverse of :func:`cumsum` on the given columns (first row kept)."""
    names = series.column_names if columns is None else list(columns)
    values = np.array(series.values)
    for name in names:
        j = series.column_names.index(name)
        values[1:, j] = np.diff(series.values[:, j])
    return series.with_values(values)


@dataclass(frozen=True)
class Scaler:
    x_min: np.ndarray
    x_max: np.ndarray
    column_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "x_min", _frozen(np.atleast_1d(self.x_min), float))
        object.__setattr__(self, "x_max", _frozen(np.atleast_1d(self.x_max), float))
        if np.any(self.x_max < self.x_min):
            raise ValueError("x_max < x_min")

    @property
    def span(self):
        return self.x_max - self.x_min

    def check(self, step=None):
        flat = np.nonzero(self.span == 0)[0]
        if len(flat):
            j = int(flat[0])
            name = self.column_names[j] if j < len(self.column_names) else str(j)
            raise DegenerateColumnError(name, step)


def fit_min_max(values, column_names=(), step=None):
    """Per-column min/max over all rows of ``values``; constant columns raise."""
    values = np.asarray(values, dtype=float)
    scaler = Scaler(values.min(axis=0), values.max(axis=0), tuple(column_names))
    scaler.check(step)
    return scaler


def fit_scaler(series, train_rows):
    if train_rows < 2:
        raise ValueError("train_rows must be >= 2")
    return fit_min_max(series.values[:train_rows], series.column_names)


def scale_values(values, scaler):
    return (np.asarray(values, dtype=float) - scaler.x_min) / scaler.span


def inverse_scale(values, scaler):
    return np.asarray(values, dtype=float) * scaler.span + scaler.x_min


def scale(series, scaler):
    scaler.check()
    return series.with_values(scale_values(series.values, scaler))


class Frame(NamedTuple):
    window: np.ndarray
    start_index: int


@dataclass(frozen=True)
class FrameDataset:
    """Chronological (window, next-row target) pairs.

    ``windows`` has shape (P, N, w) and ``targets`` (P, N); pair ``j`` covers
    series rows ``j .. j+w-1`` and targets row ``j+w``.
    """

    windows: np.ndarray
    targets: np.ndarray
    start_indices: np.ndarray
    target_timestamps: np.ndarray
    column_names: tuple
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    partition_fraction: float = 0.5
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("windows", "targets", "start_indices", "target_timestamps"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.n_train + self.n_val + self.n_test not in (0, len(self)):
            raise SplitError("split counts do not add up to the number of pairs")

    def __len__(self):
        return self.windows.shape[0]

    @property
    def window(self):
        return self.windows.shape[2]

    @property
    def N(self):
        return self.windows.shape[1]

    @property
    def split(self):
        return (self.n_train, self.n_val, self.n_test)

    def frame(self, j):
        return Frame(self.windows[j], int(self.start_indices[j]))

    def pairs(self):
        for j in range(len(self)):
            yield self.frame(j), self.targets[j]

    def region(self, name):
        """Slice for ``train``, ``val``, ``test`` or ``train_val``."""
        n, v = self.n_train, self.n_val
        return {
            "train": slice(0, n),
            "val": slice(n, n + v),
            "test": slice(n + v, n + v + self.n_test),
            "train_val": slice(0, n + v),
        }[name]

    def partition_sizes(self, fraction=None):
        """(n1, n2) for the partitioned variants; both at least 1."""
        fraction = self.partition_fraction if fraction is None else fraction
        if not 0 < fraction < 1:
            raise SplitError("partition fraction must lie in (0, 1)")
        if self.n_train < 2:
            raise SplitError("partitioning needs at least 2 training pairs")
        n1 = min(max(int(math.floor(fraction * self.n_train)), 1), self.n_train - 1)
        return n1, self.n_train - n1


def build_frames(series, window):
    """Slide a ``window``-column frame across the series: T - w pairs."""
    if window < 1:
        raise ValueError("window must be >= 1")
    T = series.T
    if T <= window:
        raise InsufficientDataError(f"series of length {T} cannot fill a window of {window} plus a target")
    values = series.values
    P = T - window
    windows = np.lib.stride_tricks.sliding_window_view(values, window, axis=0)[:P]
    return FrameDataset(
        windows=np.ascontiguousarray(windows),
        targets=values[window:],
        start_indices=np.arange(P),
        target_timestamps=series.timestamps[window:],
        column_names=series.column_names,
    )


def split_counts(n, val_frac, test_frac):
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise SplitError("need val_frac, test_frac >= 0 with val_frac + test_frac < 1")
    n_val = int(math.floor(val_frac * n + 1e-9))
    n_test = int(math.floor(test_frac * n + 1e-9))
    n_train = n - n_val - n_test
    if (val_frac > 0 and n_val == 0) or (test_frac > 0 and n_test == 0) or n_train < 1:
        raise SplitError(f"fractions {val_frac}/{test_frac} leave an empty partition for {n} pairs")
    return n_train, n_val, n_test


def split(dataset, val_frac=0.1, test_frac=0.1, partition_fraction=None):
    n_train, n_val, n_test = split_counts(len(dataset), val_frac, test_frac)
    return FrameDataset(
        dataset.windows,
        dataset.targets,
        dataset.start_indices,
        dataset.target_timestamps,
        dataset.column_names,
        n_train,
        n_val,
        n_test,
        dataset.partition_fraction if partition_fraction is None else partition_fraction,
        dict(dataset.meta),
    )


@dataclass(frozen=True)
class PreparedData:
    """Everything downstream steps need from one dataset."""

    name: str
    processed: RawSeries  # after cumsum, before scaling
    scaler: Scaler
    dataset: FrameDataset  # scaled space


def prepare(series, window, val_frac=0.1, test_frac=0.1, cumsum_columns=None,
            partition_fraction=0.5, name="series"):
    """Run cumsum -> scale -> frames -> split.

    ``cumsum_columns=None`` transforms every column; pass ``[]`` to skip.
    The scaler sees only rows reachable from training pairs (``n_train + w``).
    """
    processed = cumsum(series, cumsum_columns) if cumsum_columns != [] else series
    if processed.T <= window:
        raise InsufficientDataError(f"series of length {processed.T} cannot fill a window of {window} plus a target")
    n_train, _, _ = split_counts(processed.T - window, val_frac, test_frac)
    scaler = fit_scaler(processed, n_train + window)
    frames = build_frames(scale(processed, scaler), window)
    dataset = split(frames, val_frac, test_frac, partition_fraction)
    return PreparedData(name, processed, scaler, dataset)
