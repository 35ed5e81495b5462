"""Hyperparameter search: tree-structured Parzen estimator, random and grid search.

The TPE loop keeps a trial memory, splits it at the ``gamma`` quantile of
objective values into a good set and a bad set, fits per-dimension Parzen
densities ``l`` (good) and ``g`` (bad), draws candidates from ``l`` and
evaluates the one maximizing ``l/g``. Under the TPE factorization that ratio
is monotone in expected improvement below the quantile threshold, so this
is the usual way to maximize EI without integrating it.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, GridTooLargeError

logger = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_MIN_BANDWIDTH = 1e-3


# ------------------------------------------------------------ search space


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float
    condition: tuple | None = field(default=None, kw_only=True)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"uniform bounds need lo < hi, got ({self.lo}, {self.hi})")

    def to_internal(self, x):
        return float(x)

    def from_internal(self, u):
        return float(u)

    @property
    def bounds(self):
        return float(self.lo), float(self.hi)

    def grid(self, n):
        return list(np.linspace(self.lo, self.hi, n))

    def contains(self, x):
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.lo <= 0:
            raise ConfigError("log-uniform bounds must be positive")

    def to_internal(self, x):
        return math.log(x)

    def from_internal(self, u):
        return min(max(math.exp(u), self.lo), self.hi)

    @property
    def bounds(self):
        return math.log(self.lo), math.log(self.hi)

    def grid(self, n):
        return list(np.geomspace(self.lo, self.hi, n))


@dataclass(frozen=True)
class QuantizedRange(Uniform):
    step: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.step <= 0:
            raise ConfigError("quantization step must be positive")

    def from_internal(self, u):
        k = round((u - self.lo) / self.step)
        k = min(max(k, 0), int(math.floor((self.hi - self.lo) / self.step + 1e-9)))
        return _tidy(self.lo + k * self.step)

    def grid(self, n=None):
        values = [self.from_internal(self.lo + k * self.step)
                  for k in range(int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1)]
        if n is not None and n < len(values):
            values = [values[int(round(i))] for i in np.linspace(0, len(values) - 1, n)]
        return values


@dataclass(frozen=True)
class Choice:
    options: tuple
    condition: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if not self.options:
            raise ConfigError("choice list is empty")

    def grid(self, n=None):
        return list(self.options)

    def contains(self, x):
        return x in self.options


def _tidy(x):
    """Round to 12 significant digits so grid points like 0.3 come out exact."""
    return float(f"{float(x):.12g}")


class SearchSpace:
    """Ordered named dimensions; a dimension's ``condition=(parent, value)``
    makes it active only when choice ``parent`` takes ``value``."""

    def __init__(self, dims):
        self.dims = dict(dims)
        for name, dim in self.dims.items():
            if dim.condition is not None:
                parent, value = dim.condition
                if not isinstance(self.dims.get(parent), Choice):
                    raise ConfigError(f"{name!r} is conditioned on non-choice {parent!r}")
                if self.dims[parent].condition is not None:
                    raise ConfigError("conditional dimensions nest only one level deep")
                if value not in self.dims[parent].options:
                    raise ConfigError(f"{name!r} conditioned on unknown option {value!r}")
                if list(self.dims).index(parent) > list(self.dims).index(name):
                    raise ConfigError(f"parent {parent!r} must precede {name!r}")

    def __iter__(self):
        return iter(self.dims.items())

    def __len__(self):
        return len(self.dims)

    def is_active(self, name, point):
        cond = self.dims[name].condition
        return cond is None or point.get(cond[0]) == cond[1]

    def contains(self, point):
        for name, dim in self.dims.items():
            active = self.is_active(name, point)
            if active != (name in point):
                return False
            if active and not dim.contains(point[name]):
                return False
        return True

    def sample_prior(self, rng):
        point = {}
        for name, dim in self.dims.items():
            if not self.is_active(name, point):
                continue
            if isinstance(dim, Choice):
                point[name] = dim.options[int(rng.integers(len(dim.options)))]
            else:
                lo, hi = dim.bounds
                point[name] = dim.from_internal(rng.uniform(lo, hi))
        return point


# ------------------------------------------------------------ trial memory


@dataclass(frozen=True)
class Trial:
    params: dict
    objective: float
    failed: bool = False


@dataclass
class TrialMemory:
    seed: int | None = None
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def record(self, params, objective, failed=False):
        if not math.isfinite(objective):
            raise ValueError("trial objectives must be finite")
        self.trials.append(Trial(dict(params), float(objective), failed))

    @property
    def objectives(self):
        return np.array([t.objective for t in self.trials])

    def best(self):
        """First trial attaining the minimum objective."""
        if not self.trials:
            raise ValueError("empty trial memory")
        return self.trials[int(np.argmin(self.objectives))]

    def failure_value(self):
        """Worst observed objective plus 10% of the observed range (1.0 if empty)."""
        if not self.trials:
            return 1.0
        obj = self.objectives
        spread = float(obj.max() - obj.min())
        return float(obj.max() + 0.1 * spread) if spread > 0 else float(obj.max() + 0.1 * max(abs(obj.max()), 1.0))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "params", "objective", "failed"])
            for i, t in enumerate(self.trials):
                params = ";".join(f"{k}={v!r}" for k, v in t.params.items())
                w.writerow([i, params, repr(t.objective), int(t.failed)])

    @classmethod
    def from_csv(cls, path, seed=None):
        memory = cls(seed=seed)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                params = {}
                for item in filter(None, row["params"].split(";")):
                    key, _, text = item.partition("=")
                    params[key] = _parse_value(text)
                memory.record(params, float(row["objective"]), bool(int(row.get("failed") or 0)))
        return memory


def _parse_value(text):
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        return float(text)


# ------------------------------------------------------------ Parzen densities


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 10
    bandwidth: str = "range_over_n"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.n_candidates < 1 or self.n_startup < 1:
            raise ConfigError("n_candidates and n_startup must be >= 1")
        if self.bandwidth != "range_over_n":
            raise ConfigError(f"unknown bandwidth rule {self.bandwidth!r}")


def _phi(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _Phi(z):
    return 0.5 * math.erfc(-z / _SQRT2)


class ParzenContinuous:
    """Truncated Gaussian mixture on [lo, hi] (internal coordinates)."""

    def __init__(self, observations, lo, hi):
        self.lo, self.hi = lo, hi
        self.mus = np.asarray(observations, dtype=float)
        n = len(self.mus)
        self.sigma = max((hi - lo) / n, _MIN_BANDWIDTH) if n else None
        if n == 0:
            self.prior_weight = 1.0
        elif n == 1:
            self.prior_weight = 0.5
        else:
            self.prior_weight = 0.0
        if n:
            self.mass = np.array([_Phi((hi - m) / self.sigma) - _Phi((lo - m) / self.sigma) for m in self.mus])

    def pdf(self, x):
        density = self.prior_weight / (self.hi - self.lo)
        if len(self.mus):
            w = (1.0 - self.prior_weight) / len(self.mus)
            for m, z in zip(self.mus, self.mass):
                density += w * _phi((x - m) / self.sigma) / (self.sigma * z)
        return density

    def sample(self, rng):
        if len(self.mus) == 0 or rng.uniform() < self.prior_weight:
            return rng.uniform(self.lo, self.hi)
        m = self.mus[int(rng.integers(len(self.mus)))]
        for _ in range(100):
            x = rng.normal(m, self.sigma)
            if self.lo <= x <= self.hi:
                return x
        return min(max(m, self.lo), self.hi)


class ParzenCategorical:
    """Add-one smoothed frequencies."""

    def __init__(self, observations, options):
        self.options = options
        counts = np.ones(len(options))
        for obs in observations:
            counts[options.index(obs)] += 1
        self.p = counts / counts.sum()

    def pdf(self, x):
        return float(self.p[self.options.index(x)])

    def sample(self, rng):
        return self.options[int(rng.choice(len(self.options), p=self.p))]


def _density(dim, points, name):
    values = [p[name] for p in points if name in p]
    if isinstance(dim, Choice):
        return ParzenCategorical(values, dim.options)
    lo, hi = dim.bounds
    return ParzenContinuous([dim.to_internal(v) for v in values], lo, hi)


def split_memory(memory, gamma):
    """(good, bad) trial lists; good holds the ceil(gamma * n) lowest objectives."""
    order = np.argsort(memory.objectives, kind="stable")
    n_good = max(1, math.ceil(gamma * len(memory)))
    good = [memory.trials[i].params for i in order[:n_good]]
    bad = [memory.trials[i].params for i in order[n_good:]]
    return good, bad


def suggest(memory, space, config=TpeConfig(), rng=None):
    """Next point to evaluate."""
    rng = np.random.default_rng(rng)
    if len(memory) < config.n_startup:
        return space.sample_prior(rng)
    good, bad = split_memory(memory, config.gamma)
    l_dens = {name: _density(dim, good, name) for name, dim in space}
    g_dens = {name: _density(dim, bad, name) for name, dim in space}

    best, best_score = None, -math.inf
    for _ in range(config.n_candidates):
        point, score = {}, 0.0
        for name, dim in space:
            if not space.is_active(name, point):
                continue
            raw = l_dens[name].sample(rng)
            if isinstance(dim, Choice):
                point[name] = raw
                score += math.log(l_dens[name].pdf(raw)) - math.log(g_dens[name].pdf(raw))
            else:
                point[name] = value = dim.from_internal(raw)
                u = dim.to_internal(value)
                score += math.log(max(l_dens[name].pdf(u), 1e-300)) - math.log(max(g_dens[name].pdf(u), 1e-300))
        if score > best_score:
            best, best_score = point, score
    return best


# ------------------------------------------------------------ drivers


def _evaluate(objective, point, memory):
    try:
        value = float(objective(point))
        if not math.isfinite(value):
            raise ValueError(f"non-finite objective {value}")
    except Exception as exc:  # noqa: BLE001 - a crashed trial must not stop the study
        value = memory.failure_value()
        logger.warning("trial %d failed (%s); recorded %g", len(memory), exc, value)
        memory.record(point, value, failed=True)
        return
    memory.record(point, value)


def optimize(objective: Callable[[dict], float], space, budget, config=TpeConfig(), seed=0, memory=None):
    """Sequential TPE minimization.

    Returns ``(best_point, best_value, memory)``. A passed-in ``memory`` is
    resumed; ``budget`` new trials are added to it.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    memory = TrialMemory(seed=seed) if memory is None else memory
    for _ in range(budget):
        _evaluate(objective, suggest(memory, space, config, rng), memory)
    best = memory.best()
    return best.params, best.objective, memory


def random_search(objective, space, budget, seed=0):
    rng = np.random.default_rng(seed)
    memory = TrialMemory(seed=seed)
    for _ in range(budget):
        _evaluate(objective, space.sample_prior(rng), memory)
    best = memory.best()
    return best.params, best.objective, memory


def grid_points(space, resolution=None):
    """Lexicographic grid; continuous dimensions need a resolution entry."""
    resolution = dict(resolution or {})
    axes = []
    for name, dim in space:
        if isinstance(dim, Choice):
            axes.append([_tidy(v) if isinstance(v, float) else v for v in dim.grid()])
        elif isinstance(dim, QuantizedRange):
            axes.append(dim.grid(resolution.get(name)))
        else:
            if name not in resolution:
                raise ConfigError(f"grid resolution missing for continuous dimension {name!r}")
            if resolution[name] < 1:
                raise ConfigError(f"grid resolution for {name!r} must be >= 1")
            axes.append([_tidy(v) for v in dim.grid(int(resolution[name]))])
    return axes


def grid_size(space, resolution=None):
    return math.prod(len(a) for a in grid_points(space, resolution))


def grid_search(objective, space, resolution=None, cap=100_000):
    """Exhaustive search in lexicographic order; first-visited wins ties."""
    axes = grid_points(space, resolution)
    size = math.prod(len(a) for a in axes)
    if size > cap:
        raise GridTooLargeError(size, cap)
    names = [name for name, _ in space]
    memory = TrialMemory()
    seen = set()
    for combo in itertools.product(*axes):
        point = {}
        for name, value in zip(names, combo):
            if space.is_active(name, point):
                point[name] = value
        key = tuple(sorted(point.items()))
        if key in seen:
            continue
        seen.add(key)
        _evaluate(objective, point, memory)
    best = memory.best()
    return best.params, best.objective, memory


# ------------------------------------------------------------ ensemble tuning


def ensemble_space(variant, n_machines, epsilon=(1e-3, 1.0), fraction=(0.05, 0.95)):
    """Default search space for a proximity ensemble.

    epsilon is log-uniform inside (0, 1); alpha takes the values k/M so that
    every choice names a whole number of machines; COBRA fixes alpha at 1.
    """
    dims = {"epsilon": LogUniform(*epsilon)}
    if variant != "COBRA":
        dims["alpha"] = Choice(tuple(_tidy(k / n_machines) for k in range(1, n_machines + 1)))
    if variant != "DPE":
        dims["partition_fraction"] = Uniform(*fraction)
    return SearchSpace(dims)


@dataclass
class TuneResult:
    config: object
    value: float
    memory: TrialMemory
    context: object = None


class TuningContext:
    """Validation objective for a variant, caching one fitted bank per training split."""

    def __init__(self, dataset, machine_specs, variant, seed=0):
        from .ensemble import ProximityEnsemble, EnsembleConfig, training_region

        if dataset.n_val < 1:
            raise ConfigError("tuning needs a non-empty validation split")
        self.dataset = dataset
        self.machine_specs = list(machine_specs)
        self.variant = variant
        self.seed = seed
        self._fitted = {}
        self._Ensemble = ProximityEnsemble
        self._Config = EnsembleConfig
        self._region = training_region
        self.diagnostics = []

    @property
    def n_machines(self):
        return len(self.machine_specs)

    def config_for(self, point):
        return self._Config(
            epsilon=float(point["epsilon"]),
            alpha=float(point.get("alpha", 1.0)),
            variant=self.variant,
            partition_fraction=float(point.get("partition_fraction", self.dataset.partition_fraction)),
        )

    def ensemble(self, config):
        key = self._region(self.dataset, config.variant, config.partition_fraction).stop
        if key not in self._fitted:
            self._fitted[key] = self._Ensemble(self.machine_specs, config, self.seed).fit(self.dataset)
        return self._fitted[key].with_config(config)

    def validation(self, config):
        """(mse, mean qualified count, fallback rate) on the validation split."""
        preds, qualified = self.ensemble(config).predict_region("val", phase="tune")
        actual = self.dataset.targets[self.dataset.region("val")]
        return float(np.mean((preds - actual) ** 2)), float(qualified.mean()), float(np.mean(qualified == 0))

    def __call__(self, point):
        mse, mean_q, fallback = self.validation(self.config_for(point))
        self.diagnostics.append({"mean_qualified": mean_q, "fallback_rate": fallback})
        return mse


def tune_ensemble(dataset, machine_specs, variant, method="tpe", budget=60, seed=0,
                  resolution=None, tpe_config=TpeConfig(), space=None, context=None):
    """Pick epsilon/alpha/partition by validation MSE of the ensemble forecast."""
    context = context or TuningContext(dataset, machine_specs, variant, seed)
    space = space or ensemble_space(variant, context.n_machines)
    if method == "tpe":
        point, value, memory = optimize(context, space, budget, tpe_config, seed)
    elif method == "grid":
        point, value, memory = grid_search(context, space, resolution)
    elif method == "random":
        point, value, memory = random_search(context, space, budget, seed)
    else:
        raise ConfigError(f"unknown tuning method {method!r}")
    return TuneResult(context.config_for(point), value, memory, context)
