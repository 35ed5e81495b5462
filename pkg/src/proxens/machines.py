"""Base learners ("machines") and the bank that holds them.

A machine maps an N x w window to an N-vector one-step-ahead prediction.
The ensembles only ever call ``fit``/``predict``/``predict_batch``, so any
learner honoring that contract can join a bank.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import NotFittedError, ShapeError, SingularityError

FORMAT_VERSION = 1


def _as_pairs(windows, targets):
    windows = np.asarray(windows, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if windows.ndim != 3:
        raise ShapeError(f"windows must be (P, N, w), got shape {windows.shape}")
    if targets.ndim != 2 or targets.shape[0] != windows.shape[0]:
        raise ShapeError(f"targets must be (P, N) matching windows, got {targets.shape}")
    if targets.shape[1] != windows.shape[1]:
        raise ShapeError("target dimension differs from the window's row count")
    if windows.shape[0] == 0:
        raise ShapeError("no training pairs")
    return windows, targets


class Machine:
    """Interface shared by every base learner."""

    name = "machine"

    def __init__(self):
        self.window_shape = None

    @property
    def fitted(self):
        return self.window_shape is not None

    def fit(self, windows, targets, seed=0):
        windows, targets = _as_pairs(windows, targets)
        self.window_shape = windows.shape[1:]
        self._fit(windows.reshape(len(windows), -1), targets, seed)
        return self

    def _fit(self, X, Y, seed):
        raise NotImplementedError

    def _check_frame(self, window):
        if not self.fitted:
            raise NotFittedError(f"{self.name} machine used before fit")
        window = np.asarray(window, dtype=float)
        if window.shape != tuple(self.window_shape):
            raise ShapeError(f"frame shape {window.shape} != trained shape {tuple(self.window_shape)}")
        return window

    def predict(self, window):
        x = self._check_frame(window).reshape(-1)
        return self._predict_one(x)

    def _predict_one(self, x):
        raise NotImplementedError

    def predict_batch(self, windows):
        """Row-by-row ``predict``; bit-identical to repeated single calls."""
        windows = list(windows) if not isinstance(windows, np.ndarray) else windows
        if len(windows) == 0:
            n = self.window_shape[0] if self.fitted else 0
            return np.empty((0, n))
        return np.stack([self.predict(w) for w in windows])

    # serialization -------------------------------------------------------
    def params(self):
        return {}

    def state(self):
        return {}

    def set_state(self, state):
        pass

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "machine": self.name,
            "params": self.params(),
            "window_shape": list(self.window_shape) if self.fitted else None,
            "state": {k: np.asarray(v).tolist() for k, v in self.state().items()} if self.fitted else None,
        }

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class RidgeARMachine(Machine):
    """Linear map from the flattened window (feature-major) plus an unpenalized bias."""

    name = "ridge"

    def __init__(self, lam=1e-3):
        super().__init__()
        if lam < 0:
            raise ValueError("ridge penalty must be nonnegative")
        self.lam = float(lam)
        self.weights = None  # (N, d)
        self.bias = None  # (N,)

    def params(self):
        return {"lam": self.lam}

    def normal_equations(self, X, Y):
        """Return (A, B) with A @ beta = B, beta = [weights.T; bias]."""
        Xa = np.hstack([X, np.ones((len(X), 1))])
        penalty = np.full(Xa.shape[1], self.lam)
        penalty[-1] = 0.0
        return Xa.T @ Xa + np.diag(penalty), Xa.T @ Y

    def _fit(self, X, Y, seed):
        A, B = self.normal_equations(X, Y)
        if self.lam == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
            raise SingularityError("normal equations are singular; use lam > 0")
        try:
            beta = np.linalg.solve(A, B)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(str(exc)) from exc
        self.weights = np.ascontiguousarray(beta[:-1].T)
        self.bias = beta[-1].copy()

    def loss(self, X, Y, weights=None, bias=None):
        """Regularized least squares objective minimized by ``fit``."""
        weights = self.weights if weights is None else weights
        bias = self.bias if bias is None else bias
        R = X @ weights.T + bias - Y
        return float(np.sum(R * R) + self.lam * np.sum(weights * weights))

    def _predict_one(self, x):
        return self.weights @ x + self.bias

    def state(self):
        return {"weights": self.weights, "bias": self.bias}

    def set_state(self, state):
        self.weights = np.asarray(state["weights"], dtype=float)
        self.bias = np.asarray(state["bias"], dtype=float)


class KnnFrameMachine(Machine):
    """Uniform average of the targets of the k nearest stored windows.

    Distance is the Frobenius norm between windows; ties go to the earlier
    stored pair.
    """

    name = "knn"

    def __init__(self, k=5):
        super().__init__()
        if k < 1:
            raise ValueError("k must be positive")
        self.k = int(k)
        self.X = None
        self.Y = None

    def params(self):
        return {"k": self.k}

    def _fit(self, X, Y, seed):
        if self.k > len(X):
            raise ValueError(f"k={self.k} exceeds the {len(X)} stored pairs")
        self.X = np.ascontiguousarray(X)
        self.Y = np.ascontiguousarray(Y)

    def neighbors(self, x):
        d = _kernels.frame_distances(self.X, x)
        return np.argsort(d, kind="stable")[: self.k]

    def _predict_one(self, x):
        return self.Y[self.neighbors(x)].mean(axis=0)

    def state(self):
        return {"X": self.X, "Y": self.Y}

    def set_state(self, state):
        self.X = np.asarray(state["X"], dtype=float)
        self.Y = np.asarray(state["Y"], dtype=float)


class MlpMachine(Machine):
    """One tanh hidden layer, linear output, Adam on mean squared error."""

    name = "mlp"

    def __init__(self, hidden=16, learning_rate=0.001, epochs=80, batch_size=32):
        super().__init__()
        self.hidden = int(hidden)
        self.learning_rate = float(learning_rate)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.W1 = self.b1 = self.W2 = self.b2 = None
        self.loss_history = []

    def params(self):
        return {
            "hidden": self.hidden,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }

    def init_params(self, d, n_out, rng):
        lim1 = np.sqrt(6.0 / (d + self.hidden))
        lim2 = np.sqrt(6.0 / (self.hidden + n_out))
        self.W1 = rng.uniform(-lim1, lim1, size=(self.hidden, d))
        self.b1 = np.zeros(self.hidden)
        self.W2 = rng.uniform(-lim2, lim2, size=(n_out, self.hidden))
        self.b2 = np.zeros(n_out)

    @property
    def param_arrays(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def forward(self, X):
        H = np.tanh(X @ self.W1.T + self.b1)
        return H, H @ self.W2.T + self.b2

    def loss_and_grads(self, X, Y):
        """Mean squared error over all entries and its parameter gradients."""
        H, out = self.forward(X)
        R = out - Y
        loss = float(np.mean(R * R))
        dout = 2.0 * R / R.size
        gW2 = dout.T @ H
        gb2 = dout.sum(axis=0)
        dA = (dout @ self.W2) * (1.0 - H * H)
        gW1 = dA.T @ X
        gb1 = dA.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2]

    def _fit(self, X, Y, seed):
        rng = np.random.default_rng(seed)
        self.init_params(X.shape[1], Y.shape[1], rng)
        params = self.param_arrays
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = 0
        self.loss_history = [self.loss_and_grads(X, Y)[0]]
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                _, grads = self.loss_and_grads(X[idx], Y[idx])
                t += 1
                for p, g, mi, vi in zip(params, grads, m, v):
                    mi *= b1
                    mi += (1 - b1) * g
                    vi *= b2
                    vi += (1 - b2) * g * g
                    mhat = mi / (1 - b1**t)
                    vhat = vi / (1 - b2**t)
                    p -= self.learning_rate * mhat / (np.sqrt(vhat) + eps)
            self.loss_history.append(self.loss_and_grads(X, Y)[0])

    def _predict_one(self, x):
        h = np.tanh(self.W1 @ x + self.b1)
        return self.W2 @ h + self.b2

    def state(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def set_state(self, state):
        for key in ("W1", "b1", "W2", "b2"):
            setattr(self, key, np.asarray(state[key], dtype=float))


REGISTRY = {cls.name: cls for cls in (RidgeARMachine, KnnFrameMachine, MlpMachine)}


def make_machine(name, **params):
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown machine {name!r}; known: {sorted(REGISTRY)}") from None
    return cls(**params)


def machine_from_dict(blob):
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported machine format version {blob.get('format_version')!r}")
    machine = make_machine(blob["machine"], **blob["params"])
    if blob.get("window_shape") is not None:
        machine.window_shape = tuple(blob["window_shape"])
        machine.set_state(blob["state"])
    return machine


def save_machine(machine, path):
    Path(path).write_text(json.dumps(machine.to_dict()))


def load_machine(path):
    return machine_from_dict(json.loads(Path(path).read_text()))


class MachineBank:
    """An ordered roster of machines trained on the same pairs."""

    def __init__(self, machines):
        self.machines = list(machines)
        if not self.machines:
            raise ValueError("a bank needs at least one machine")

    @classmethod
    def from_specs(cls, specs):
        """``specs``: iterable of ``(name, params)`` or ``{"name":..., "params":...}``."""
        machines = []
        for spec in specs:
            if isinstance(spec, dict):
                name, params = spec["name"], spec.get("params") or {}
            else:
                name, params = spec
            machines.append(make_machine(name, **params))
        return cls(machines)

    def __len__(self):
        return len(self.machines)

    def __iter__(self):
        return iter(self.machines)

    @property
    def names(self):
        return [m.name for m in self.machines]

    def fit(self, windows, targets, seed=0):
        for i, machine in enumerate(self.machines):
            machine.fit(windows, targets, seed=seed + i)
        return self

    def predict_batch(self, windows):
        """(K, M, N) predictions of every machine on every window."""
        return np.stack([m.predict_batch(windows) for m in self.machines], axis=1)

    def predict(self, window):
        return np.stack([m.predict(window) for m in self.machines])
