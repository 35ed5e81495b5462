import csv
import json

import numpy as np
import pytest
import yaml

from proxens import cli
from proxens.experiment import ExperimentConfig, Runner
from proxens.errors import ConfigError

SMALL = {
    "config_version": 1,
    "seed": 0,
    "datasets": [{"name": "sine", "synthetic": "sinusoid", "params": {"length": 300}}],
    "data": {"window": 4, "cumsum_columns": []},
    "machines": [
        {"name": "ridge", "params": {"lam": 0.001}},
        {"name": "knn", "params": {"k": 3}},
        {"name": "mlp", "params": {"hidden": 6, "epochs": 5}},
    ],
    "tuning": {"budget": 12, "grid_resolution": {"epsilon": 6, "partition_fraction": 2}},
    "evaluation": {"space": "scaled"},
    "dynamic": {"horizon": 5},
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(SMALL))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(tmp_path, verb, out="out", *extra, **overrides):
    path = write_config(tmp_path, **overrides)
    code = cli.main([verb, "--config", str(path), "--out-dir", str(tmp_path / out), *extra])
    return code, tmp_path / out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({**SMALL, "colour": "red"})


def test_unknown_machine_rejected():
    with pytest.raises(ConfigError, match="unknown machine"):
        ExperimentConfig.from_dict({**SMALL, "machines": [{"name": "svm"}]})


def test_hash_tracks_every_field():
    a = ExperimentConfig.from_dict(SMALL)
    assert a.hash() == ExperimentConfig.from_dict(SMALL).hash()
    assert a.hash() != ExperimentConfig.from_dict(SMALL, seed=1).hash()
    other = json.loads(json.dumps(SMALL))
    other["machines"][1]["params"]["k"] = 4
    assert a.hash() != ExperimentConfig.from_dict(other).hash()


def test_duplicate_machine_labels():
    cfg = ExperimentConfig.from_dict({**SMALL, "machines": [{"name": "knn"}, {"name": "knn"}]})
    assert cfg.machine_labels == ["knn", "knn_2"]


# ---------------------------------------------------------------- prepare


def test_prepare_hash_stable_and_keyed_on_window(tmp_path):
    assert invoke(tmp_path, "prepare", "a")[0] == 0
    assert invoke(tmp_path, "prepare", "b")[0] == 0
    assert invoke(tmp_path, "prepare", "c", data={"window": 5, "cumsum_columns": []})[0] == 0
    names = [sorted(p.name for p in (tmp_path / d / "cache").iterdir()) for d in "abc"]
    assert names[0] == names[1] and names[0] != names[2]
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["command"] == "prepare" and len(m["artifacts"]) == 1


def test_missing_data_file(tmp_path, capsys):
    code, _ = invoke(tmp_path, "prepare", datasets=[{"name": "x", "path": "nowhere.csv"}])
    assert code == 2
    assert "nowhere.csv" in capsys.readouterr().err


def test_csv_dataset(tmp_path):
    rows = ["t,a,b"] + [f"{i},{np.sin(i / 4):.6f},{np.cos(i / 7):.6f}" for i in range(120)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    code, out = invoke(tmp_path, "prepare", datasets=[{"name": "csvdata", "path": "d.csv"}])
    assert code == 0


def test_config_errors_exit_one(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml"), "--out-dir", str(tmp_path)]) == 1
    assert invoke(tmp_path, "run", ensembles=["XYZ"])[0] == 1


# ---------------------------------------------------------------- run


@pytest.fixture(scope="module")
def run_twice(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    codes = [invoke(base, "run", name)[0] for name in ("r1", "r2")]
    return codes, base / "r1", base / "r2"


def test_run_matrix_columns(run_twice):
    codes, out, _ = run_twice
    assert codes == [0, 0]
    header = read_csv(out / "metrics_rmse.csv")[0]
    assert header == ["dataset", "ridge", "knn", "mlp", "DPE", "PaDPE", "COBRA"]
    values = [float(v) for v in read_csv(out / "metrics_rmse.csv")[1][1:]]
    assert all(np.isfinite(values))
    report = json.loads((out / "comparison_rmse.json").read_text())
    assert set(report["avg_rank"]) == set(header[1:])


def test_run_is_byte_identical(run_twice):
    _, a, b = run_twice
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_run_predictions_exported(run_twice):
    _, out, _ = run_twice
    rows = read_csv(out / "predictions" / "sine-DPE.csv")
    assert rows[0][-2:] == ["qualified_count", "fallback"]
    assert len(rows) - 1 == 29  # floor(0.1 * 296) test pairs


def test_crashing_machine_is_isolated(tmp_path):
    machines = SMALL["machines"] + [{"name": "knn", "params": {"k": 10_000}}]
    code, out = invoke(tmp_path, "run", machines=machines)
    assert code == 3
    row = read_csv(out / "metrics_rmse.csv")[1]
    header = read_csv(out / "metrics_rmse.csv")[0]
    assert row[header.index("knn_2")] == ""
    assert all(row[header.index(m)] for m in ("ridge", "knn", "mlp", "DPE", "PaDPE", "COBRA"))
    runs = json.loads((out / "runs.json").read_text())
    assert {r["model"] for r in runs if r["status"] == "failed"} == {"knn_2"}
    assert json.loads((out / "manifest.json").read_text())["failures"][0]["model"] == "knn_2"


def test_report_recomputes_comparison(run_twice, tmp_path):
    _, out, _ = run_twice
    cfg = ExperimentConfig.from_dict(SMALL)
    before = (out / "comparison_rmse.json").read_text()
    Runner(cfg, out).cmd_report()
    assert (out / "comparison_rmse.json").read_text() == before


def test_report_without_run(tmp_path):
    assert invoke(tmp_path, "report")[0] == 2


# ---------------------------------------------------------------- tune / ablate


def test_tune_writes_trials(tmp_path):
    code, out = invoke(tmp_path, "tune", ensembles=["DPE"])
    assert code == 0
    assert len(read_csv(out / "trials" / "sine-DPE.csv")) == 13
    tuned = json.loads((out / "tuned.json").read_text())
    assert tuned["sine/DPE"]["config"]["variant"] == "DPE"


def test_machine_hyperparameter_tuning(tmp_path):
    machines = [{"name": "knn", "params": {"k": 3}, "space": {"k": {"quantized": [1, 9, 1]}}},
                {"name": "ridge"}]
    code, out = invoke(tmp_path, "tune", machines=machines, ensembles=["DPE"],
                       tuning={"machine_budget": 6})
    assert code == 0
    specs = json.loads((out / "tuned.json").read_text())["sine/DPE"]["machines"]
    assert 1 <= specs[0][1]["k"] <= 9


def test_ablate_rows_and_normalization(tmp_path):
    code, out = invoke(tmp_path, "ablate")
    assert code == 0
    rows = read_csv(out / "ablation.csv")
    assert rows[0] == ["variant", "rmse", "mape", "rmse_normalized", "mape_normalized"]
    assert [r[0] for r in rows[1:]] == ["GridCOBRA", "BOACOBRA", "GridDPE", "BOADPE", "BOAPaDPE", "GridPaDPE"]
    for col in (3, 4):
        values = [float(r[col]) for r in rows[1:]]
        assert all(0 < v <= 1 for v in values) and max(values) == 1.0


def test_ablate_budget_parity(tmp_path, capsys):
    machines = [{"name": "ridge"}, {"name": "ridge", "params": {"lam": 1}}, {"name": "knn"},
                {"name": "knn", "params": {"k": 2}}, {"name": "knn", "params": {"k": 8}}]
    code, _ = invoke(tmp_path, "ablate", machines=machines,
                     tuning={"budget": 60, "grid_resolution": {"epsilon": 10, "partition_fraction": 6}})
    assert code == 1
    assert "GridDPE: grid of 50 points" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep / dynamic


@pytest.mark.parametrize("param, rows", [("alpha", 3), ("epsilon", 10)])
def test_sweep(tmp_path, param, rows):
    code, out = invoke(tmp_path, "sweep", "out", "--param", param)
    assert code == 0
    data = read_csv(out / f"sweep_{param}_sine.csv")
    assert data[0] == ["x", "mse", "mean_qualified_count", "fallback_rate"]
    assert len(data) - 1 == rows


def test_sweep_single_point(tmp_path):
    code, out = invoke(tmp_path, "sweep", "out", "--param", "epsilon", sweep={"epsilons": [0.05]})
    assert code == 0 and len(read_csv(out / "sweep_epsilon_sine.csv")) == 2


def test_dynamic(tmp_path):
    code, out = invoke(tmp_path, "dynamic", "out", "--horizon", "3")
    assert code == 0
    rows = read_csv(out / "dynamic_sine.csv")
    assert len(rows) == 4 and rows[0][0] == "step"


def test_dynamic_backtest_too_long(tmp_path):
    code, _ = invoke(tmp_path, "dynamic", "out", "--horizon", "500", dynamic={"mode": "backtest"})
    assert code == 1


def test_bundled_run_within_five_minutes(tmp_path):
    import time
    from pathlib import Path

    import proxens

    start = time.perf_counter()
    code = cli.main(["run", "--config", str(Path(proxens.__file__).parent / "configs" / "sinusoid.yaml"),
                     "--out-dir", str(tmp_path)])
    assert code == 0
    assert time.perf_counter() - start < 300
