"""Experiment configuration: YAML file with one section per building block."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .drivers import DriverSpec
from .errors import ConfigError
from .forward import ForwardModel, TimeGrid
from .lsmc import BasisSpec

SECTIONS = ("driver", "model", "grid", "solver", "liquidation", "verify", "outputs")

DEFAULTS = {
    "grid": {"kind": "uniform", "n_steps": 1000, "eps_cut": 0.0, "ratio": 0.8},
    "solver": {"scheme": "ode", "n": 1000.0, "step": "flow", "tol": 1e-10, "max_iter": 60,
               "n_paths": 1000, "seed": 0, "regularization": None, "replications": 4,
               "basis": {"family": "polynomial", "degree": 3, "knots": 8}},
    "liquidation": {"p": 2.0, "x0": 1.0, "dp_time": 200, "dp_space": 200},
    "verify": {"n_sigma": 3.0, "max_rate": None, "solution": None},
    "outputs": {"dir": "out", "formats": ["csv", "json"]},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown field {where}.{key}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    driver: DriverSpec
    model: ForwardModel
    grid: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["grid"]))
    solver: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["solver"]))
    liquidation: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["liquidation"]))
    verify: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["verify"]))
    outputs: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["outputs"]))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        extra = set(data) - set(SECTIONS)
        if extra:
            raise ConfigError(f"unknown sections {sorted(extra)}")
        for need in ("driver", "model"):
            if need not in data:
                raise ConfigError(f"missing section {need!r}")
        driver = DriverSpec.from_dict(data["driver"])
        model = ForwardModel.from_dict(data["model"])
        rest = {name: _merge(DEFAULTS[name], data.get(name) or {}, name)
                for name in SECTIONS[2:]}
        cfg = cls(driver, model, **rest)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {"driver": self.driver.to_dict(), "model": self.model.to_dict()}
        for name in SECTIONS[2:]:
            out[name] = copy.deepcopy(getattr(self, name))
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        g = self.grid
        if g["kind"] not in ("uniform", "refined"):
            raise ConfigError(f"unknown grid kind {g['kind']!r}")
        if int(g["n_steps"]) < 1:
            raise ConfigError("grid.n_steps must be >= 1")
        s = self.solver
        if s["scheme"] not in ("ode", "penalized", "picard", "hat"):
            raise ConfigError(f"unknown scheme {s['scheme']!r}")
        if int(s["n_paths"]) < 1:
            raise ConfigError("solver.n_paths must be >= 1")
        if s["regularization"] is not None and len(s["regularization"]) != 2:
            raise ConfigError("solver.regularization must be [delta, eps] or null")
        for fmt in self.outputs["formats"]:
            if fmt not in ("csv", "json"):
                raise ConfigError(f"unknown output format {fmt!r}")
        self.make_grid()
        self.basis()

    def make_grid(self) -> TimeGrid:
        g = self.grid
        T = self.model.horizon
        if g["kind"] == "uniform":
            return TimeGrid.uniform(T, int(g["n_steps"]), float(g["eps_cut"]))
        eps = float(g["eps_cut"]) or 1e-3 * T
        return TimeGrid.refined(T, int(g["n_steps"]), eps, float(g["ratio"]))

    def basis(self) -> BasisSpec:
        b = self.solver["basis"]
        return BasisSpec(b["family"], int(b["degree"]), int(b["knots"]))

    def with_overrides(self, seed=None, paths=None, out=None, fmt=None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if seed is not None:
            if not 0 <= int(seed) < 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg.solver["seed"] = int(seed)
        if paths is not None:
            if int(paths) < 1:
                raise ConfigError("--paths must be >= 1")
            cfg.solver["n_paths"] = int(paths)
        if out is not None:
            cfg.outputs["dir"] = str(out)
        if fmt is not None:
            cfg.outputs["formats"] = [fmt]
        cfg.validate()
        return cfg
