"""Consensus-weighted proximity ensembles: DPE, PaDPE and COBRA.

A query frame is pushed through every machine. Each proximity frame whose
cached machine predictions fall within ``epsilon`` of the query's
predictions for at least ``ceil(M * alpha)`` machines qualifies; the forecast
is the uniform average of the qualified frames' targets. With no qualified
frame the forecast falls back to the mean of the machines' predictions.

Variant layouts (``n`` training pairs, ``n1 + n2 = n``, ``v`` validation):

=======  ===============  ================  =====================
variant  machines fit on  tune proximity    test proximity
=======  ===============  ================  =====================
DPE      D_n              D_n               D_n + D_v
PaDPE    D_n1             D_n1 + D_n2       D_n1 + D_n2 + D_v
COBRA    D_n1             D_n2              D_n2 + D_v
=======  ===============  ================  =====================
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, ShapeError
from .machines import MachineBank

VARIANTS = ("DPE", "PaDPE", "COBRA")
PHASES = ("tune", "test")
_COUNT_GUARD = 1e-9


@dataclass(frozen=True)
class EnsembleConfig:
    epsilon: float
    alpha: float = 1.0
    variant: str = "DPE"
    partition_fraction: float = 0.5
    norm: str = "euclidean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.variant == "COBRA" and self.alpha != 1:
            raise ConfigError("COBRA is the alpha = 1 (all machines agree) rule")
        if not 0 < self.partition_fraction < 1:
            raise ConfigError("partition_fraction must lie in (0, 1)")
        if self.norm != "euclidean":
            raise ConfigError("only the euclidean norm is implemented")

    @property
    def partitioned(self):
        return self.variant in ("PaDPE", "COBRA")

    def required(self, n_machines):
        """Machines that must agree: ceil(M * alpha), guarded against round-off."""
        if n_machines * self.alpha < 1 - _COUNT_GUARD:
            raise ConfigError(f"M * alpha = {n_machines * self.alpha:g} < 1")
        return min(math.ceil(n_machines * self.alpha - _COUNT_GUARD), n_machines)

    def replace(self, **changes):
        fields = dict(self.__dict__)
        fields.update(changes)
        return EnsembleConfig(**fields)


@dataclass(frozen=True)
class ProximitySet:
    preds: np.ndarray  # (S, M, N)
    targets: np.ndarray  # (S, N)
    provenance: np.ndarray  # (S,) region labels

    def __post_init__(self):
        preds = np.ascontiguousarray(self.preds, dtype=float)
        targets = np.ascontiguousarray(self.targets, dtype=float)
        if preds.ndim != 3 or targets.ndim != 2 or preds.shape[0] != targets.shape[0]:
            raise ShapeError("proximity predictions must be (S, M, N) with (S, N) targets")
        if preds.shape[0] < 1:
            raise DataError("empty proximity set")
        if preds.shape[2] != targets.shape[1]:
            raise ShapeError("prediction and target dimensions differ")
        if not np.all(np.isfinite(preds)):
            raise ValueError("non-finite machine predictions in proximity set")
        for name, a in (("preds", preds), ("targets", targets), ("provenance", np.asarray(self.provenance))):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.preds.shape[0]

    @property
    def n_machines(self):
        return self.preds.shape[1]


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    qualified_count: int

    @property
    def fallback(self):
        return self.qualified_count == 0


class Diagnostics(NamedTuple):
    qualified_count: int
    fallback: bool


def training_region(dataset, variant, partition_fraction=None):
    if variant == "DPE":
        return slice(0, dataset.n_train)
    n1, _ = dataset.partition_sizes(partition_fraction)
    return slice(0, n1)


def proximity_regions(dataset, variant, phase, partition_fraction=None):
    """``[(label, slice), ...]`` making up the proximity set."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    n, v = dataset.n_train, dataset.n_val
    if n < 1:
        raise DataError("no training pairs")
    if variant == "DPE":
        regions = [("train", slice(0, n))]
    else:
        n1, _ = dataset.partition_sizes(partition_fraction)
        regions = [("train2", slice(n1, n))]
        if variant == "PaDPE":
            regions.insert(0, ("train1", slice(0, n1)))
    if phase == "test":
        if v < 1:
            raise DataError("test-phase proximity set needs a validation split")
        regions.append(("val", slice(n, n + v)))
    return regions


def build_proximity_set(bank, dataset, config, phase, predictions=None):
    """Cache machine predictions over the variant's proximity frames.

    ``predictions`` may hold (P, M, N) predictions for every pair of the
    dataset, computed once and shared between phases.
    """
    regions = proximity_regions(dataset, config.variant, phase, config.partition_fraction)
    index = np.concatenate([np.arange(len(dataset))[s] for _, s in regions])
    labels = np.concatenate([np.full(s.stop - s.start, label) for label, s in regions])
    if predictions is None:
        preds = bank.predict_batch(dataset.windows[index])
    else:
        preds = np.asarray(predictions)[index]
    return ProximitySet(preds, dataset.targets[index], labels)


def _check_query(prox, query_preds):
    q = np.asarray(query_preds, dtype=float)
    if q.shape != prox.preds.shape[1:]:
        raise ShapeError(f"query predictions {q.shape} do not match proximity set {prox.preds.shape[1:]}")
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite query predictions")
    return q


def consensus_weights(prox, query_preds, config):
    q = _check_query(prox, query_preds)
    D = _kernels.prediction_distances(prox.preds, q[None])
    counts = _kernels.consensus_counts(D, config.epsilon)[0]
    mask = counts >= config.required(prox.n_machines)
    qualified = int(mask.sum())
    weights = mask / qualified if qualified else np.zeros(len(prox))
    return WeightVector(weights, qualified)


def aggregate(prox, weights, query_preds):
    """Weighted target average, or the mean machine prediction when nothing qualified."""
    q = np.asarray(query_preds, dtype=float)
    if weights.fallback:
        return q.mean(axis=0)
    return (weights.weights[:, None] * prox.targets).sum(axis=0)


def predict_from_predictions(prox, query_preds, config):
    """Batch forecast from (K, M, N) query predictions.

    Returns ``(preds (K, N), qualified_counts (K,))``.
    """
    Q = np.asarray(query_preds, dtype=float)
    if Q.ndim != 3 or Q.shape[1:] != prox.preds.shape[1:]:
        raise ShapeError("query predictions must be (K, M, N) matching the proximity set")
    D = _kernels.prediction_distances(prox.preds, Q)
    return _kernels.consensus_predict(D, prox.targets, Q.mean(axis=1), config.epsilon,
                                      config.required(prox.n_machines))


def predict_ensemble(bank, prox, query, config):
    q = bank.predict(query)
    weights = consensus_weights(prox, q, config)
    return aggregate(prox, weights, q), Diagnostics(weights.qualified_count, weights.fallback)


class ProximityEnsemble:
    """Fit a machine bank for one variant and forecast with it.

    Machine predictions for every pair of the dataset are computed once at
    fit time and reused by both proximity phases.
    """

    def __init__(self, machine_specs, config, seed=0):
        self.machine_specs = list(machine_specs)
        self.config = config
        self.seed = seed
        self.bank = None
        self.dataset = None
        self.predictions = None
        self._prox = {}

    def fit(self, dataset, bank=None):
        region = training_region(dataset, self.config.variant, self.config.partition_fraction)
        if bank is None:
            bank = MachineBank.from_specs(self.machine_specs)
            bank.fit(dataset.windows[region], dataset.targets[region], seed=self.seed)
        self.bank = bank
        self.dataset = dataset
        self.predictions = bank.predict_batch(dataset.windows)
        self._prox = {}
        return self

    def with_config(self, config):
        """Same fitted bank under a config with the same training region."""
        same_region = training_region(self.dataset, config.variant, config.partition_fraction) == training_region(
            self.dataset, self.config.variant, self.config.partition_fraction
        )
        if config.partitioned != self.config.partitioned or not same_region:
            raise ConfigError("with_config cannot change the machines' training region")
        other = ProximityEnsemble(self.machine_specs, config, self.seed)
        other.bank, other.dataset, other.predictions = self.bank, self.dataset, self.predictions
        other._prox = self._prox
        return other

    def proximity_set(self, phase):
        if phase not in self._prox:
            self._prox[phase] = build_proximity_set(self.bank, self.dataset, self.config, phase, self.predictions)
        return self._prox[phase]

    def predict(self, window, phase="test"):
        return predict_ensemble(self.bank, self.proximity_set(phase), window, self.config)

    def predict_region(self, region="test", phase=None):
        """Forecast every pair of a dataset region; phase defaults per region."""
        phase = phase or ("tune" if region == "val" else "test")
        s = self.dataset.region(region)
        return predict_from_predictions(self.proximity_set(phase), self.predictions[s], self.config)


def export_predictions(path, timestamps, preds, qualified, column_names):
    """CSV rows of (timestamp, per-dimension prediction, qualified_count, fallback)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *[f"pred_{c}" for c in column_names], "qualified_count", "fallback"])
        for t, p, q in zip(timestamps, preds, qualified):
            w.writerow([str(t), *[repr(float(x)) for x in p], int(q), int(q == 0)])
