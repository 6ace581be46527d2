import csv
import json
from pathlib import Path

import pytest
import yaml

from singular_bsde.cli import main
from singular_bsde.config import ExperimentConfig
from singular_bsde.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


STOCH = {"driver": {"kind": "power", "q": 1.0},
         "model": {"kind": "drifted", "gamma0": 1.0, "drift": 0.0, "vol": 0.1,
                   "eta_floor": 0.5, "eta_cap": 2.0, "lam": 0.5},
         "grid": {"kind": "refined", "n_steps": 60, "eps_cut": 1e-3},
         "solver": {"n_paths": 400, "seed": 3}}


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict(STOCH)
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert ExperimentConfig.load(path).to_dict() == cfg.to_dict()


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(STOCH, solver={"n_pathz": 3}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"driver": {"kind": "power", "q": 1}})


def test_overrides():
    cfg = ExperimentConfig.from_dict(STOCH).with_overrides(seed=9, paths=12, out="x", fmt="csv")
    assert cfg.solver["seed"] == 9 and cfg.solver["n_paths"] == 12
    assert cfg.outputs == {"dir": "x", "formats": ["csv"]}
    with pytest.raises(ConfigError):
        cfg.with_overrides(seed=-1)


def test_check_driver_power_q2(tmp_path):
    code = main(["check-driver", "--config", str(CONFIGS / "power_q2.yaml"),
                 "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "check_driver.json").read_text())
    assert report["passed"] and report["c2"] and report["schema_version"] == "1"
    assert report["config"]["driver"] == {"kind": "power", "q": 2.0}


def test_check_driver_logpower_exits_1(tmp_path):
    cfg = _write(tmp_path, {"driver": {"kind": "logpower", "q": 2.0},
                            "model": {"kind": "constant", "eta": 1.0}})
    assert main(["check-driver", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_solve_ode_csv(tmp_path):
    assert main(["solve-ode", "--config", str(CONFIGS / "ode.yaml"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "solve_ode.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["t"]) == 0.0
    assert float(rows[0]["mean"]) == pytest.approx(1.0, abs=1e-6)


def test_config_error_exit_2(tmp_path, capsys):
    bad = _write(tmp_path, {"driver": {"kind": "power", "q": 1}, "model": {"kind": "nope"}})
    assert main(["solve-ode", "--config", bad, "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["solve-ode", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_solve_ode_refuses_stochastic_model(tmp_path):
    cfg = _write(tmp_path, STOCH)
    assert main(["solve-ode", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_byte_identical_reruns(tmp_path):
    cfg = _write(tmp_path, dict(STOCH, solver={"scheme": "penalized", "n_paths": 300, "seed": 5}))
    for d in ("a", "b"):
        assert main(["solve-penalized", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("solve_penalized.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    a = json.loads((tmp_path / "a" / "solve_penalized.json").read_text())
    assert a["config"]["solver"]["seed"] == 5


def test_seed_changes_output(tmp_path):
    cfg = _write(tmp_path, STOCH)
    main(["solve-penalized", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["solve-penalized", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "solve_penalized.csv").read_bytes() != \
        (tmp_path / "b" / "solve_penalized.csv").read_bytes()


@pytest.mark.parametrize("cmd", ["solve-picard", "solve-hat"])
def test_remainder_solvers_and_verify(tmp_path, cmd):
    cfg = _write(tmp_path, STOCH)
    assert main([cmd, "--config", cfg, "--out", str(tmp_path)]) == 0
    stem = cmd.replace("-", "_")
    assert (tmp_path / f"{stem}_H.csv").exists()
    assert main(["verify", "--config", cfg, "--out", str(tmp_path),
                 "--solution", str(tmp_path / f"{stem}.npz")]) == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["passed"] and len(rep["checks"]) == 3


def test_verify_penalized_includes_residuals(tmp_path):
    cfg = _write(tmp_path, STOCH)
    main(["solve-penalized", "--config", cfg, "--out", str(tmp_path)])
    assert main(["verify", "--config", cfg, "--out", str(tmp_path),
                 "--solution", str(tmp_path / "solve_penalized.npz")]) == 0
    names = [c["name"] for c in json.loads((tmp_path / "verify.json").read_text())["checks"]]
    assert "residual_tstat" in names


def test_verify_needs_solution(tmp_path):
    cfg = _write(tmp_path, STOCH)
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_liquidate_deterministic(tmp_path):
    assert main(["liquidate", "--config", str(CONFIGS / "liquidation.yaml"),
                 "--out", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "liquidate.json").read_text())
    assert out["checks"] == {"feedback_below_twap": True, "dp_agrees_2pct": True}
    header = (tmp_path / "liquidate.csv").read_text().splitlines()[0]
    assert header == "path,feedback,twap"


def test_format_json_only(tmp_path):
    main(["solve-ode", "--config", str(CONFIGS / "ode.yaml"), "--out", str(tmp_path),
          "--format", "json"])
    assert (tmp_path / "solve_ode.json").exists()
    assert not (tmp_path / "solve_ode.csv").exists()


def test_repro_subset(tmp_path):
    cfg = _write(tmp_path, STOCH)
    assert main(["repro", "--config", cfg, "--out", str(tmp_path), "--only", "1a", "6"]) == 0
    out = json.loads((tmp_path / "repro.json").read_text())
    assert [c["key"] for c in out["criteria"]] == ["1a", "6"]
