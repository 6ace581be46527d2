"""Command-line runner: ``singular-bsde <subcommand> --config run.yaml``.

Exit codes: 0 when every embedded check passes, 1 when a check fails,
2 on configuration errors. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import acceptance
from .config import ExperimentConfig
from .drivers import check_conditions, companions
from .errors import ConfigError, SingularBsdeError
from .forward import compute_A, simulate
from .liquidation import LiquidationProblem, dp_oracle, feedback_strategy, twap, write_costs_csv
from .solvers import (BsdeSolution, assemble_Y, solve_general_hat, solve_ode, solve_penalized,
                      solve_picard_sharp)
from .verify import SCHEMA_VERSION, VerificationReport, check_bounds, check_H_bounds, \
    check_residuals

log = logging.getLogger("singular_bsde")

COMMANDS = ("check-driver", "solve-ode", "solve-penalized", "solve-picard", "solve-hat",
            "verify", "liquidate", "repro")


def _default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return str(obj)


class Run:
    """Output directory plus the resolved config of one invocation."""

    def __init__(self, command: str, cfg: ExperimentConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.outputs["dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.formats = cfg.outputs["formats"]
        self.stem = command.replace("-", "_")
        self.path("_config.yaml").write_text(cfg.to_yaml())

    def path(self, suffix: str) -> Path:
        return self.out / f"{self.stem}{suffix}"

    def json(self, payload: dict, suffix: str = ".json") -> None:
        if "json" not in self.formats:
            return
        doc = {"schema_version": SCHEMA_VERSION, "command": self.command}
        doc.update(payload)
        doc["config"] = self.cfg.to_dict()
        self.path(suffix).write_text(json.dumps(doc, indent=2, sort_keys=True,
                                                default=_default) + "\n")


# helpers


def _constant_eta_lam(cfg: ExperimentConfig) -> tuple[float, float]:
    m = cfg.model
    if not m.deterministic or not isinstance(m.lam, (int, float)):
        raise ConfigError("solve-ode needs a constant model with a numeric lambda")
    return 1.0 / m.gamma0, float(m.lam)


def _ensemble(cfg: ExperimentConfig):
    grid = cfg.make_grid()
    n = 1 if cfg.model.deterministic else int(cfg.solver["n_paths"])
    return simulate(cfg.model, grid, n, int(cfg.solver["seed"]))


def _comp(cfg):
    return companions(cfg.driver, cfg.model.eta_cap, cfg.model.lambda_norm())


def _bound_report(cfg, Y: BsdeSolution, A, lower: bool = True) -> VerificationReport:
    v = cfg.verify
    return check_bounds(Y, A, _comp(cfg), n_sigma=float(v["n_sigma"]), max_rate=v["max_rate"],
                        lower=lower, sandwich=lower)


def _solve(cfg: ExperimentConfig, scheme: str):
    """Returns (Y, H or None, ensemble, A, report)."""
    spec, model, s = cfg.driver, cfg.model, cfg.solver
    basis = cfg.basis()
    if scheme == "ode":
        eta, lam = _constant_eta_lam(cfg)
        Y = solve_ode(spec, eta, lam, cfg.make_grid())
        A = Y.time_to_go[None, :] * model.gamma0
        return Y, None, None, A, _bound_report(cfg, Y, A)
    ens = _ensemble(cfg)
    A = compute_A(model, ens, basis)
    if scheme == "penalized":
        Y = solve_penalized(spec, model, ens, float(s["n"]), basis, step=s["step"])
        # a finite terminal value sits below phi(A) near T, only the upper bound applies
        return Y, None, ens, A, _bound_report(cfg, Y, A, lower=False)
    if scheme == "picard":
        H = solve_picard_sharp(spec, model, ens, tol=float(s["tol"]),
                               max_iter=int(s["max_iter"]), basis=basis)
        Y = assemble_Y(spec, A, H, "sharp", ensemble=ens, basis=basis)
        rep = _bound_report(cfg, Y, A)
        rep.extend(check_H_bounds(H, "sharp", _comp(cfg), R=H.meta["R"]))
        return Y, H, ens, A, rep
    if scheme == "hat":
        reg = s["regularization"]
        H = solve_general_hat(spec, model, ens, regularization=None if reg is None else
                              tuple(map(float, reg)), basis=basis, A=A)
        Y = assemble_Y(spec, A, H, "hat", eta_cap=model.eta_cap)
        rep = _bound_report(cfg, Y, A)
        rep.extend(check_H_bounds(H, "hat", _comp(cfg)))
        return Y, H, ens, A, rep
    raise ConfigError(f"unknown scheme {scheme!r}")


def _write_solution(run: Run, Y: BsdeSolution, H, rep: VerificationReport) -> None:
    if "csv" in run.formats:
        Y.write_csv(run.path(".csv"))
        if H is not None:
            H.write_csv(run.path("_H.csv"))
    Y.save(run.path(".npz"))
    payload = {"passed": rep.passed, "solution": Y.summary(), "checks": rep.to_dict()}
    if H is not None:
        payload["remainder"] = H.summary()
    run.json(payload)


# subcommands


def cmd_check_driver(run: Run) -> int:
    report = check_conditions(run.cfg.driver)
    payload = json.loads(report.to_json())
    payload["passed"] = report.all_pass
    run.json(payload)
    if "csv" in run.formats:
        with open(run.path(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "holds"])
            for name in ("a3", "c1", "c2", "c3", "c4", "c5"):
                w.writerow([name.upper(), getattr(report, name)])
    for note in report.notes:
        print(note, file=sys.stderr)
    return 0 if report.all_pass else 1


def _solve_cmd(scheme: str):
    def run_it(run: Run) -> int:
        Y, H, _, _, rep = _solve(run.cfg, scheme)
        _write_solution(run, Y, H, rep)
        for c in rep.checks:
            if not c.passed:
                print(f"check {c.name} failed: {c.violations} of {c.nodes_tested} "
                      f"(max {c.max_violation:.3g})", file=sys.stderr)
        return 0 if rep.passed else 1
    return run_it


def cmd_verify(run: Run, solution: str | None) -> int:
    cfg = run.cfg
    path = solution or cfg.verify["solution"]
    if not path:
        raise ConfigError("verify needs --solution or verify.solution")
    try:
        Y = BsdeSolution.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read solution {path}: {exc}") from exc
    if Y.kind != "Y":
        raise ConfigError("verify expects a stored Y solution")
    if cfg.model.deterministic:
        A = Y.time_to_go[None, :] * cfg.model.gamma0
        ens = simulate(cfg.model, Y.grid, 1, int(cfg.solver["seed"]))
    else:
        ens = simulate(cfg.model, Y.grid, Y.values.shape[0], int(cfg.solver["seed"]))
        A = compute_A(cfg.model, ens, cfg.basis())
    if ens.gamma.shape[0] != Y.values.shape[0] and Y.values.shape[0] != 1:
        raise ConfigError("solution and regenerated ensemble disagree in path count")
    rep = _bound_report(cfg, Y, A, lower=not Y.scheme.startswith("penalized"))
    # the residual inverts the penalized one-step map; assembled solutions have none
    if Y.scheme.startswith("penalized") and not cfg.model.deterministic:
        rep.extend(check_residuals(Y, cfg.driver, cfg.model, ens, basis=cfg.basis(),
                                   rule=Y.meta.get("step")))
    run.json(rep.to_dict())
    if "csv" in run.formats:
        with open(run.path(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "nodes_tested", "violations", "max_violation", "passed"])
            for c in rep.checks:
                w.writerow([c.name, c.nodes_tested, c.violations, "%.12g" % c.max_violation,
                            c.passed])
    return 0 if rep.passed else 1


def cmd_liquidate(run: Run) -> int:
    cfg = run.cfg
    liq = cfg.liquidation
    problem = LiquidationProblem(float(liq["p"]), float(liq["x0"]), cfg.model)
    if cfg.driver.kind != "power" or abs(cfg.driver.q - problem.q) > 1e-12:
        raise ConfigError("liquidation needs a power driver with q = 1/(p-1)")
    scheme = cfg.solver["scheme"]
    if scheme not in ("ode", "penalized", "picard"):
        raise ConfigError("liquidation uses the ode, penalized or picard solution")
    Y, _, ens, _, _ = _solve(cfg, scheme)
    fb = feedback_strategy(problem, Y, ens)
    tw = twap(problem, Y.grid, ens)
    strategies = [fb, tw]
    diff = tw.cost - fb.cost
    se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
    gap = float(diff.mean())
    checks = {"feedback_below_twap": bool(gap > 0 and gap >= 3 * se)}
    payload = {"value": float(Y.mean()[0]) * abs(problem.x0) ** problem.p,
               "twap_gap": gap, "twap_gap_stderr": se,
               "strategies": [s.summary() for s in strategies]}
    if cfg.model.deterministic:
        dp = dp_oracle(problem, int(liq["dp_time"]), int(liq["dp_space"]))
        rel = abs(dp.value - fb.cost[0]) / abs(fb.cost[0])
        payload.update(dp_value=dp.value, dp_rel_gap=rel)
        checks["dp_agrees_2pct"] = bool(rel <= 0.02)
    payload["checks"] = checks
    payload["passed"] = all(checks.values())
    if "csv" in run.formats:
        write_costs_csv(run.path(".csv"), strategies)
    run.json(payload)
    return 0 if payload["passed"] else 1


def cmd_repro(run: Run, only=None) -> int:
    cfg = run.cfg
    results = acceptance.run_all(n_paths=int(cfg.solver["n_paths"]),
                                 seed=int(cfg.solver["seed"]), only=only)
    for r in results:
        print(r.line(), file=sys.stderr)
    if "csv" in run.formats:
        with open(run.path(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["criterion", "passed", "title"])
            for r in results:
                w.writerow([r.key, r.passed, r.title])
    run.json({"passed": all(r.passed for r in results),
              "criteria": [{"key": r.key, "title": r.title, "passed": r.passed,
                            "seconds": r.seconds, "details": r.details} for r in results]})
    return 0 if all(r.passed for r in results) else 1


# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singular-bsde",
                                 description="Solve BSDEs with singular terminal values.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment file")
    common.add_argument("--seed", type=int, help="override solver.seed (u64)")
    common.add_argument("--paths", type=int, help="override solver.n_paths")
    common.add_argument("--out", help="override outputs.dir")
    common.add_argument("--format", choices=("csv", "json"), help="write only this format")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "verify":
            p.add_argument("--solution", help="stored solution (.npz) to check")
        if name == "repro":
            p.add_argument("--only", nargs="+", choices=sorted(acceptance.CRITERIA),
                           help="run a subset of the criteria")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config).with_overrides(
            seed=args.seed, paths=args.paths, out=args.out, fmt=args.format)
        run = Run(args.command, cfg)
        if args.command == "check-driver":
            return cmd_check_driver(run)
        if args.command == "verify":
            return cmd_verify(run, args.solution)
        if args.command == "liquidate":
            return cmd_liquidate(run)
        if args.command == "repro":
            return cmd_repro(run, args.only)
        return _solve_cmd(args.command.split("-", 1)[1])(run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SingularBsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
