"""Hot loops: prediction-space distances, consensus counts, frame distances.

Each kernel has a numba ``@njit`` version and a pure-numpy version. The
numba path is used when numba imports and ``PROXENS_DISABLE_NUMBA`` is unset
(or ``0``); both live in this module so tests and the benchmark can call
either one directly.

Distances are always ``sqrt`` of a sequential sum of squares so that both
backends agree bit-for-bit on short output vectors.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False

DISABLED = os.environ.get("PROXENS_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
BACKEND = "numba" if HAVE_NUMBA and not DISABLED else "numpy"


# ---------------------------------------------------------------- numpy path


def np_prediction_distances(P, Q):
    """(K, S, M) Euclidean distances between query and proximity predictions.

    P: (S, M, N) proximity-set predictions, Q: (K, M, N) query predictions.
    """
    diff = P[None, :, :, :] - Q[:, None, :, :]
    sq = diff * diff
    acc = sq[..., 0].copy()
    for j in range(1, sq.shape[-1]):
        acc += sq[..., j]
    return np.sqrt(acc)


def np_consensus_counts(D, eps):
    """(K, S) number of machines within ``eps``."""
    return (D <= eps).sum(axis=-1).astype(np.int64)


def np_consensus_predict(D, targets, fallback, eps, required):
    """Weighted-target prediction for each query.

    Returns (preds (K, N), qualified (K,)). Queries with no qualified frame
    get their ``fallback`` row.
    """
    qualified_mask = np_consensus_counts(D, eps) >= required
    qualified = qualified_mask.sum(axis=1)
    safe = np.where(qualified > 0, qualified, 1).astype(float)
    weights = qualified_mask / safe[:, None]
    preds = (weights[:, :, None] * targets[None, :, :]).sum(axis=1)
    preds = np.where((qualified > 0)[:, None], preds, fallback)
    return preds, qualified.astype(np.int64)


def np_frame_distances(stored, query):
    """(S,) Frobenius distances between flattened stored windows and a query."""
    diff = stored - query[None, :]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=False)
    def nb_prediction_distances(P, Q):
        S, M, N = P.shape
        K = Q.shape[0]
        out = np.empty((K, S, M))
        for k in range(K):
            for i in range(S):
                for m in range(M):
                    acc = 0.0
                    for j in range(N):
                        d = P[i, m, j] - Q[k, m, j]
                        acc += d * d
                    out[k, i, m] = np.sqrt(acc)
        return out

    @numba.njit(cache=False)
    def nb_consensus_counts(D, eps):
        K, S, M = D.shape
        out = np.zeros((K, S), dtype=np.int64)
        for k in range(K):
            for i in range(S):
                c = 0
                for m in range(M):
                    if D[k, i, m] <= eps:
                        c += 1
                out[k, i] = c
        return out

    @numba.njit(cache=False)
    def nb_consensus_predict(D, targets, fallback, eps, required):
        K, S, M = D.shape
        N = targets.shape[1]
        preds = np.empty((K, N))
        qualified = np.zeros(K, dtype=np.int64)
        mask = np.zeros(S, dtype=np.bool_)
        for k in range(K):
            q = 0
            for i in range(S):
                c = 0
                for m in range(M):
                    if D[k, i, m] <= eps:
                        c += 1
                mask[i] = c >= required
                if mask[i]:
                    q += 1
            qualified[k] = q
            if q == 0:
                for j in range(N):
                    preds[k, j] = fallback[k, j]
                continue
            w = 1.0 / q
            for j in range(N):
                acc = 0.0
                for i in range(S):
                    if mask[i]:
                        acc += w * targets[i, j]
                preds[k, j] = acc
        return preds, qualified

    @numba.njit(cache=False)
    def nb_frame_distances(stored, query):
        S, d = stored.shape
        out = np.empty(S)
        for i in range(S):
            acc = 0.0
            for j in range(d):
                t = stored[i, j] - query[j]
                acc += t * t
            out[i] = np.sqrt(acc)
        return out

else:  # pragma: no cover
    nb_prediction_distances = np_prediction_distances
    nb_consensus_counts = np_consensus_counts
    nb_consensus_predict = np_consensus_predict
    nb_frame_distances = np_frame_distances


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if BACKEND == "numba":

    def prediction_distances(P, Q):
        return nb_prediction_distances(_c(P), _c(Q))

    def consensus_counts(D, eps):
        return nb_consensus_counts(_c(D), float(eps))

    def consensus_predict(D, targets, fallback, eps, required):
        return nb_consensus_predict(_c(D), _c(targets), _c(fallback), float(eps), int(required))

    def frame_distances(stored, query):
        return nb_frame_distances(_c(stored), _c(query))

else:
    prediction_distances = np_prediction_distances
    consensus_counts = np_consensus_counts
    consensus_predict = np_consensus_predict
    frame_distances = np_frame_distances
