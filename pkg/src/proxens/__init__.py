"""Proximity-based forecast ensembles (DPE, PaDPE, COBRA) for multivariate series."""

from ._kernels import BACKEND
from .data import (
    FrameDataset,
    RawSeries,
    Scaler,
    build_frames,
    cumsum,
    fit_scaler,
    inverse_scale,
    load_csv,
    prepare,
    scale,
    split,
)
from .ensemble import (
    EnsembleConfig,
    ProximityEnsemble,
    ProximitySet,
    aggregate,
    build_proximity_set,
    consensus_weights,
    predict_ensemble,
)
from .machines import KnnFrameMachine, MachineBank, MlpMachine, RidgeARMachine, make_machine

__version__ = "0.1.0"
