"""Config-driven experiments: prepare, run, tune, ablate, sweep, dynamic, report.

Every command writes under ``out_dir`` and finishes by writing
``manifest.json`` listing the artifacts with their digests and the config
hash. Outputs depend only on the config (seed included), never on wall time.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as dp
from . import evaluation as ev
from . import hpo, synthetic
from .dynamic import dynamic_forecast, export_dynamic_log
from .ensemble import VARIANTS, export_predictions
from .errors import ConfigError, DataError
from .machines import REGISTRY, make_machine, save_machine

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
ABLATION_VARIANTS = (
    ("GridCOBRA", "COBRA", "grid"),
    ("BOACOBRA", "COBRA", "tpe"),
    ("GridDPE", "DPE", "grid"),
    ("BOADPE", "DPE", "tpe"),
    ("BOAPaDPE", "PaDPE", "tpe"),
    ("GridPaDPE", "PaDPE", "grid"),
)

DEFAULTS = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "datasets": [],
    "data": {
        "window": 5,
        "val_frac": 0.1,
        "test_frac": 0.1,
        "cumsum_columns": "all",
        "feature_columns": None,
        "drop_missing": True,
        "partition_fraction": 0.5,
    },
    "machines": [
        {"name": "ridge", "params": {"lam": 0.001}},
        {"name": "knn", "params": {"k": 5}},
        {"name": "mlp", "params": {}},
    ],
    "ensembles": ["DPE", "PaDPE", "COBRA"],
    "tuning": {
        "method": "tpe",
        "budget": 60,
        "machine_budget": 0,
        "grid_resolution": {"epsilon": 20, "partition_fraction": 3},
        "grid_cap": 100000,
        "tpe": {"gamma": 0.25, "n_candidates": 24, "n_startup": 10},
        "epsilon_range": [0.001, 1.0],
        "fraction_range": [0.05, 0.95],
    },
    "evaluation": {"space": "raw", "reference": "DPE"},
    "sweep": {"variant": "DPE", "alphas": None, "epsilons": None},
    "dynamic": {"variant": "DPE", "horizon": 10, "mode": "rollout", "refit_every": 0},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path, seed=None):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            text = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(text, base_dir=path.parent, seed=seed)

    @classmethod
    def from_dict(cls, d, base_dir=None, seed=None):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        if d.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {d.get('config_version')!r}")
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = _merge(DEFAULTS, d)
        if seed is not None:
            raw["seed"] = int(seed)
        cfg = cls(raw, Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    def validate(self):
        r = self.raw
        if not r["datasets"]:
            raise ConfigError("no datasets configured")
        for ds in r["datasets"]:
            if "name" not in ds or ("path" in ds) == ("synthetic" in ds):
                raise ConfigError("each dataset needs a name and exactly one of path/synthetic")
        names = [ds["name"] for ds in r["datasets"]]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        for m in r["machines"]:
            if m.get("name") not in REGISTRY:
                raise ConfigError(f"unknown machine {m.get('name')!r}; known: {sorted(REGISTRY)}")
        for v in r["ensembles"]:
            if v not in VARIANTS:
                raise ConfigError(f"unknown ensemble variant {v!r}")
        if r["tuning"]["method"] not in ("tpe", "grid", "random"):
            raise ConfigError("tuning.method must be tpe, grid or random")
        if r["evaluation"]["space"] not in ("raw", "scaled"):
            raise ConfigError("evaluation.space must be raw or scaled")
        if r["dynamic"]["mode"] not in ("rollout", "backtest"):
            raise ConfigError("dynamic.mode must be rollout or backtest")
        try:
            self.tpe_config
        except TypeError as exc:
            raise ConfigError(f"bad tuning.tpe block: {exc}") from exc

    # accessors --------------------------------------------------------------
    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def machine_specs(self):
        return [(m["name"], dict(m.get("params") or {})) for m in self.raw["machines"]]

    @property
    def machine_labels(self):
        labels, seen = [], {}
        for name, _ in self.machine_specs:
            seen[name] = seen.get(name, 0) + 1
            labels.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
        return labels

    @property
    def tpe_config(self):
        return hpo.TpeConfig(**self.raw["tuning"]["tpe"])

    def hash(self):
        """Digest of the full resolved config; any output-affecting change alters it."""
        blob = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def data_hash(self, dataset):
        blob = json.dumps({"v": CONFIG_VERSION, "dataset": dataset, "data": self.raw["data"]},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def space(self, variant, n_machines):
        t = self.raw["tuning"]
        return hpo.ensemble_space(variant, n_machines, tuple(t["epsilon_range"]), tuple(t["fraction_range"]))


# ------------------------------------------------------------------ data


def _space_from_spec(spec):
    dims = {}
    for name, d in (spec or {}).items():
        d = dict(d)
        cond = tuple(d.pop("condition")) if "condition" in d else None
        (kind, args), = d.items()
        if kind == "uniform":
            dims[name] = hpo.Uniform(*args, condition=cond)
        elif kind == "loguniform":
            dims[name] = hpo.LogUniform(*args, condition=cond)
        elif kind == "quantized":
            dims[name] = hpo.QuantizedRange(*args, condition=cond)
        elif kind == "choice":
            dims[name] = hpo.Choice(tuple(args), condition=cond)
        else:
            raise ConfigError(f"unknown dimension kind {kind!r} for {name!r}")
    return hpo.SearchSpace(dims)


def load_series(cfg, ds):
    if "synthetic" in ds:
        params = dict(ds.get("params") or {})
        params.setdefault("seed", cfg.seed)
        return synthetic.make(ds["synthetic"], **params)
    path = Path(ds["path"])
    if not path.is_absolute():
        path = cfg.base_dir / path
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    d = cfg.raw["data"]
    return dp.load_csv(path, ds.get("timestamp_column"), ds.get("feature_columns") or d["feature_columns"],
                       ds.get("drop_missing", d["drop_missing"]))


def prepare_dataset(cfg, ds):
    d = cfg.raw["data"]
    series = load_series(cfg, ds)
    cols = ds.get("cumsum_columns", d["cumsum_columns"])
    cols = None if cols == "all" else list(cols or [])
    try:
        return dp.prepare(series, int(d["window"]), float(d["val_frac"]), float(d["test_frac"]), cols,
                          float(d["partition_fraction"]), ds["name"])
    except KeyError as exc:
        raise ConfigError(f"dataset {ds['name']}: {exc}") from exc


def save_prepared(pd, path):
    ds = pd.dataset
    np.savez(
        path,
        name=pd.name,
        processed=pd.processed.values,
        timestamps=pd.processed.timestamps,
        columns=np.array(pd.processed.column_names),
        x_min=pd.scaler.x_min,
        x_max=pd.scaler.x_max,
        windows=ds.windows,
        targets=ds.targets,
        split=np.array(ds.split),
        partition_fraction=ds.partition_fraction,
    )


def load_prepared(path):
    z = np.load(path, allow_pickle=False)
    cols = tuple(str(c) for c in z["columns"])
    processed = dp.RawSeries(z["processed"], z["timestamps"], cols)
    scaler = dp.Scaler(z["x_min"], z["x_max"], cols)
    window = z["windows"].shape[2]
    n_train, n_val, n_test = (int(v) for v in z["split"])
    dataset = dp.FrameDataset(z["windows"], z["targets"], np.arange(len(z["targets"])),
                              processed.timestamps[window:], cols, n_train, n_val, n_test,
                              float(z["partition_fraction"]))
    return dp.PreparedData(str(z["name"]), processed, scaler, dataset)


class Runner:
    """Executes commands for one resolved config."""

    def __init__(self, cfg, out_dir, jobs=1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.jobs = max(1, int(jobs))
        self.artifacts = []
        self.failures = []

    # helpers ----------------------------------------------------------------
    def _emit(self, path):
        self.artifacts.append(Path(path))
        return path

    def write_manifest(self, command):
        entries = []
        for p in sorted(set(self.artifacts)):
            entries.append({"path": str(p.relative_to(self.out)), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        manifest = {"command": command, "config_hash": self.cfg.hash(), "seed": self.cfg.seed,
                    "artifacts": entries, "failures": self.failures}
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    def _map(self, fn, items):
        if self.jobs == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.jobs) as pool:
            return list(pool.map(fn, items))

    def prepared(self, ds):
        cache_dir = self.out / "cache"
        cache_dir.mkdir(exist_ok=True)
        path = cache_dir / f"{ds['name']}-{self.cfg.data_hash(ds)}.npz"
        if path.exists():
            return load_prepared(path), path
        pd = prepare_dataset(self.cfg, ds)
        save_prepared(pd, path)
        return pd, path

    def tune(self, dataset, variant, method=None, specs=None, context=None):
        t = self.cfg.raw["tuning"]
        specs = specs if specs is not None else self.cfg.machine_specs
        context = context or hpo.TuningContext(dataset, specs, variant, self.cfg.seed)
        return hpo.tune_ensemble(dataset, specs, variant, method or t["method"], int(t["budget"]),
                                 self.cfg.seed, t["grid_resolution"], self.cfg.tpe_config,
                                 self.cfg.space(variant, len(specs)), context)

    def _metric_arrays(self, pd, region, preds):
        ds = pd.dataset
        actual = ds.targets[ds.region(region)]
        return actual, preds, dp.inverse_scale(actual, pd.scaler), dp.inverse_scale(preds, pd.scaler)

    def tuned_machine_specs(self, pd):
        """Optionally tune each machine's own hyperparameters on validation MSE."""
        budget = int(self.cfg.raw["tuning"]["machine_budget"])
        specs = self.cfg.machine_specs
        if budget <= 0:
            return specs
        ds = pd.dataset
        tr, va = ds.region("train"), ds.region("val")
        out = []
        for m_cfg, (name, params) in zip(self.cfg.raw["machines"], specs):
            space_spec = m_cfg.get("space")
            if not space_spec:
                out.append((name, params))
                continue

            def objective(point, name=name, params=params):
                machine = make_machine(name, **{**params, **point})
                machine.fit(ds.windows[tr], ds.targets[tr], seed=self.cfg.seed)
                return float(np.mean((machine.predict_batch(ds.windows[va]) - ds.targets[va]) ** 2))

            point, _, _ = hpo.optimize(objective, _space_from_spec(space_spec), budget, self.cfg.tpe_config,
                                       self.cfg.seed)
            out.append((name, {**params, **point}))
        return out

    # commands ---------------------------------------------------------------
    def cmd_prepare(self):
        paths = []
        for ds in self.cfg.raw["datasets"]:
            _, path = self.prepared(ds)
            paths.append(self._emit(path))
        self.write_manifest("prepare")
        return paths

    def _run_dataset(self, ds):
        pd, _ = self.prepared(ds)
        dataset = pd.dataset
        specs = self.tuned_machine_specs(pd)
        labels = self.cfg.machine_labels
        train, test = dataset.region("train"), dataset.region("test")
        runs, rows, failures = {}, [], []
        healthy = []
        mdir = self.out / "machines" / pd.name
        mdir.mkdir(parents=True, exist_ok=True)
        for i, ((name, params), label) in enumerate(zip(specs, labels)):
            try:
                machine = make_machine(name, **params).fit(dataset.windows[train], dataset.targets[train],
                                                           seed=self.cfg.seed + i)
                preds = machine.predict_batch(dataset.windows[test])
                if not np.all(np.isfinite(preds)):
                    raise FloatingPointError("non-finite predictions")
            except Exception as exc:  # noqa: BLE001 - isolate the failing cell
                logger.error("%s/%s failed: %s", pd.name, label, exc)
                failures.append({"dataset": pd.name, "model": label, "error": f"{type(exc).__name__}: {exc}"})
                continue
            healthy.append((name, params))
            save_machine(machine, mdir / f"{label}.json")
            self._emit(mdir / f"{label}.json")
            a, p, ar, pr = self._metric_arrays(pd, "test", preds)
            runs[label] = ev.ForecastRun(label, pd.name, a, p, ar, pr, 0, dataset.column_names)
            rows.append({"model": label, "kind": "machine", "params": params})

        for variant in self.cfg.raw["ensembles"]:
            try:
                if not healthy:
                    raise RuntimeError("no machine survived training")
                result = self.tune(dataset, variant, specs=healthy)
                ens = result.context.ensemble(result.config)
                preds, qualified = ens.predict_region("test")
                path = self.out / "predictions" / f"{pd.name}-{variant}.csv"
                path.parent.mkdir(exist_ok=True)
                raw_preds = dp.inverse_scale(preds, pd.scaler)
                out_preds = raw_preds if self.cfg.raw["evaluation"]["space"] == "raw" else preds
                export_predictions(path, dataset.target_timestamps[test], out_preds, qualified, dataset.column_names)
                self._emit(path)
            except Exception as exc:  # noqa: BLE001
                logger.error("%s/%s failed: %s", pd.name, variant, exc)
                failures.append({"dataset": pd.name, "model": variant, "error": f"{type(exc).__name__}: {exc}"})
                continue
            a, p, ar, pr = self._metric_arrays(pd, "test", preds)
            runs[variant] = ev.ForecastRun(variant, pd.name, a, p, ar, pr, int(np.sum(qualified == 0)),
                                           dataset.column_names)
            rows.append({"model": variant, "kind": "ensemble", "params": result.config.__dict__,
                         "validation_mse": result.value})
        return pd.name, runs, rows, failures

    def cmd_run(self):
        models = self.cfg.machine_labels + list(self.cfg.raw["ensembles"])
        results = self._map(self._run_dataset, self.cfg.raw["datasets"])
        space = self.cfg.raw["evaluation"]["space"]
        names = [r[0] for r in results]
        matrices = {m: np.full((len(results), len(models)), math.nan) for m in ("rmse", "mape")}
        summary = []
        for i, (name, runs, rows, failures) in enumerate(results):
            self.failures.extend(failures)
            info = {r["model"]: r for r in rows}
            for j, model in enumerate(models):
                if model not in runs:
                    summary.append({"dataset": name, "model": model, "status": "failed"})
                    continue
                metrics = runs[model].metrics(space)
                matrices["rmse"][i, j] = metrics["rmse"]
                matrices["mape"][i, j] = metrics["mape"]
                summary.append({"dataset": name, "model": model, "status": "ok", **metrics,
                                "params": info[model]["params"], "validation_mse": info[model].get("validation_mse")})
        reports = {}
        for metric, matrix in matrices.items():
            self._emit(self._write_matrix(metric, matrix, models, names))
            rep = ev.compare_models(matrix, models, names, metric, self.cfg.raw["evaluation"]["reference"])
            path = self.out / f"comparison_{metric}.json"
            rep.write_json(path)
            self._emit(path)
            reports[metric] = rep
        path = self.out / "runs.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))
        self._emit(path)
        self.write_manifest("run")
        return reports, summary

    def _write_matrix(self, metric, matrix, models, names):
        path = self.out / f"metrics_{metric}.csv"
        ev.write_metric_matrix(path, matrix, models, names)
        return path

    def cmd_tune(self):
        tuned = {}
        for ds in self.cfg.raw["datasets"]:
            pd, _ = self.prepared(ds)
            specs = self.tuned_machine_specs(pd)
            for variant in self.cfg.raw["ensembles"]:
                result = self.tune(pd.dataset, variant, specs=specs)
                path = self.out / "trials" / f"{pd.name}-{variant}.csv"
                path.parent.mkdir(exist_ok=True)
                result.memory.to_csv(path)
                self._emit(path)
                tuned[f"{pd.name}/{variant}"] = {"config": result.config.__dict__, "validation_mse": result.value,
                                                  "machines": specs}
        path = self.out / "tuned.json"
        path.write_text(json.dumps(tuned, indent=2, sort_keys=True, default=_jsonable))
        self._emit(path)
        self.write_manifest("tune")
        return tuned

    def check_budget_parity(self):
        t = self.cfg.raw["tuning"]
        m = len(self.cfg.machine_specs)
        for label, variant, method in ABLATION_VARIANTS:
            if method != "grid":
                continue
            size = hpo.grid_size(self.cfg.space(variant, m), t["grid_resolution"])
            if size < int(t["budget"]):
                raise ConfigError(f"{label}: grid of {size} points is smaller than the TPE budget {t['budget']}")
            if size > int(t["grid_cap"]):
                raise ConfigError(f"{label}: grid of {size} points exceeds grid_cap {t['grid_cap']}")

    def cmd_ablate(self):
        self.check_budget_parity()
        errors = {label: {"rmse": [], "mape": []} for label, _, _ in ABLATION_VARIANTS}
        space = self.cfg.raw["evaluation"]["space"]
        for ds in self.cfg.raw["datasets"]:
            pd, _ = self.prepared(ds)
            contexts = {}
            for label, variant, method in ABLATION_VARIANTS:
                context = contexts.setdefault(
                    variant, hpo.TuningContext(pd.dataset, self.cfg.machine_specs, variant, self.cfg.seed))
                result = self.tune(pd.dataset, variant, method, context=context)
                preds, qualified = context.ensemble(result.config).predict_region("test")
                a, p, ar, pr = self._metric_arrays(pd, "test", preds)
                metrics = ev.ForecastRun(label, pd.name, a, p, ar, pr, int(np.sum(qualified == 0))).metrics(space)
                errors[label]["rmse"].append(metrics["rmse"])
                errors[label]["mape"].append(metrics["mape"])
        rows = []
        means = {label: {k: float(np.mean(v)) for k, v in e.items()} for label, e in errors.items()}
        peak = {k: max(m[k] for m in means.values()) for k in ("rmse", "mape")}
        for label, _, _ in ABLATION_VARIANTS:
            row = {"variant": label}
            for k in ("rmse", "mape"):
                row[k] = means[label][k]
                row[f"{k}_normalized"] = means[label][k] / peak[k] if peak[k] > 0 else math.nan
            rows.append(row)
        path = self.out / "ablation.csv"
        with open(path, "w") as fh:
            fh.write("variant,rmse,mape,rmse_normalized,mape_normalized\n")
            for r in rows:
                fh.write(",".join([r["variant"], *(repr(r[k]) for k in ("rmse", "mape", "rmse_normalized",
                                                                          "mape_normalized"))]) + "\n")
        self._emit(path)
        self.write_manifest("ablate")
        return rows

    def cmd_sweep(self, parameter):
        if parameter not in ("alpha", "epsilon"):
            raise ConfigError("sweep parameter must be alpha or epsilon")
        s = self.cfg.raw["sweep"]
        variant = s["variant"]
        if variant == "COBRA" and parameter == "alpha":
            raise ConfigError("COBRA fixes alpha at 1; sweep DPE or PaDPE instead")
        m = len(self.cfg.machine_specs)
        outputs = {}
        for ds in self.cfg.raw["datasets"]:
            pd, _ = self.prepared(ds)
            result = self.tune(pd.dataset, variant)
            if parameter == "alpha":
                values = s["alphas"] or [k / m for k in range(1, m + 1)]
                rows = ev.sweep_alpha(result.context, result.config, values)
            else:
                values = s["epsilons"] or list(np.geomspace(0.001, 0.01, 10))
                rows = ev.sweep_epsilon(result.context, result.config, values)
            path = self.out / f"sweep_{parameter}_{pd.name}.csv"
            ev.write_sweep_csv(path, rows)
            self._emit(path)
            outputs[pd.name] = rows
        self.write_manifest(f"sweep-{parameter}")
        return outputs

    def cmd_dynamic(self, horizon=None):
        dcfg = self.cfg.raw["dynamic"]
        horizon = int(horizon or dcfg["horizon"])
        outputs = {}
        for ds in self.cfg.raw["datasets"]:
            pd, _ = self.prepared(ds)
            result = self.tune(pd.dataset, dcfg["variant"])
            ens = result.context.ensemble(result.config)
            dataset = pd.dataset
            window = dataset.window
            cut = dataset.n_train + dataset.n_val + window
            initial = pd.processed.head(cut)
            actuals = None
            if dcfg["mode"] == "backtest":
                actuals = pd.processed.values[cut:cut + horizon]
                if len(actuals) < horizon:
                    raise ConfigError(f"backtest horizon {horizon} exceeds the {len(actuals)} held-out rows")
            preds, state = dynamic_forecast(initial, ens.bank, ens.proximity_set("test"), result.config, horizon,
                                            window, actuals, int(dcfg["refit_every"]), self.cfg.seed)
            path = self.out / f"dynamic_{pd.name}.csv"
            export_dynamic_log(state, path)
            self._emit(path)
            outputs[pd.name] = (preds, state)
        self.write_manifest("dynamic")
        return outputs

    def cmd_report(self):
        reports = {}
        for metric in ("rmse", "mape"):
            path = self.out / f"metrics_{metric}.csv"
            if not path.exists():
                raise DataError(f"{path} not found; run the 'run' command first")
            matrix, models, names = ev.read_metric_matrix(path)
            rep = ev.compare_models(matrix, models, names, metric, self.cfg.raw["evaluation"]["reference"])
            out = self.out / f"comparison_{metric}.json"
            rep.write_json(out)
            self._emit(out)
            self._emit(path)
            reports[metric] = rep
        self.write_manifest("report")
        return reports


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)
