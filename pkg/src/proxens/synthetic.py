"""Bundled synthetic series so nothing needs a download."""

import numpy as np

from .data import RawSeries


def damped_sinusoid(length=1000, period=25.0, decay=20000.0, noise=0.05, seed=0):
    """Two phase-shifted sinusoids with slowly decaying amplitude plus noise.

    The level sits at 10 so raw values stay positive (MAPE is defined), and
    the decay keeps late values inside the early range.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=float)
    amp = np.exp(-t / decay)
    phase = 2 * np.pi * t / period
    values = 10.0 + np.column_stack([amp * np.sin(phase), 0.5 * amp * np.cos(phase)])
    values += noise * rng.standard_normal(values.shape)
    return RawSeries(values, np.arange(length), ("sin", "cos"))


def random_walk(length=1000, scale=1.0, level=100.0, seed=0):
    """Two independent Gaussian random walks started at ``level``."""
    rng = np.random.default_rng(seed)
    values = level + np.cumsum(scale * rng.standard_normal((length, 2)), axis=0)
    return RawSeries(values, np.arange(length), ("walk_a", "walk_b"))


GENERATORS = {"sinusoid": damped_sinusoid, "random_walk": random_walk}


def make(name, **kwargs):
    try:
        return GENERATORS[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown synthetic dataset {name!r}; known: {sorted(GENERATORS)}") from None
