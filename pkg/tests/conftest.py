import numpy as np
import pytest

from proxens import data, synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sinusoid_prepared():
    series = synthetic.damped_sinusoid(length=400, seed=0)
    return data.prepare(series, window=4, cumsum_columns=[])


@pytest.fixture(scope="session")
def small_specs():
    return [("ridge", {"lam": 1e-3}), ("knn", {"k": 3}), ("mlp", {"hidden": 8, "epochs": 5})]


def random_instance(rng, S=None, M=None, N=None):
    S = S or int(rng.integers(1, 21))
    M = M or int(rng.integers(1, 5))
    N = N or int(rng.integers(1, 4))
    P = rng.uniform(0, 1, size=(S, M, N))
    q = rng.uniform(0, 1, size=(M, N))
    return P, q


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
