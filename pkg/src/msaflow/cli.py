"""Command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 runtime or
configuration error (including any non-finite number in the outputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, default_config, dump_config, parse_config, with_overrides
from .core import ControlField, EnsembleShape, make_time_grid, sample_brownian
from .flow import energy_identity_check, gap_bound_check, run_gradient_flow
from .msa import StalledError, run_msa

log = logging.getLogger("msaflow")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_RUNTIME = 0, 1, 2

VERIFY_NAMES = ("tau-rate", "sublinear", "exponential", "grad-vanishing", "energy-identity", "gap-bound")


class NonFiniteOutput(RuntimeError):
    pass


def fmt(x: float) -> str:
    """17 significant digits; refuses NaN and infinities."""
    x = float(x)
    if not math.isfinite(x):
        raise NonFiniteOutput(f"non-finite value {x!r} in output")
    return f"{x:.17g}"


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) and not isinstance(v, bool) else fmt(v) for v in row])


def _plain(obj):
    if is_dataclass(obj):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        fmt(obj)
        return float(obj)
    return obj


def write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    doc = {"config": json.loads(dump_config(cfg)), **_plain(payload)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


class Run:
    """Objects shared by every subcommand: problem, grid, noise and initial control."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.spec = cfg.problem()
        g = cfg.section("grid")
        e = cfg.section("ensemble")
        self.grid = make_time_grid(g["T"], g["n_steps"])
        self.shape = EnsembleShape(e["n_paths"], self.spec.d, self.spec.d_w, self.spec.p)
        self.W = sample_brownian(e["seed"], self.shape, self.grid)
        a0 = np.asarray(cfg.section("problem")["alpha0"], float)
        if a0.size not in (1, self.spec.p):
            raise ConfigError(f"problem.alpha0: expected a scalar or {self.spec.p} values", "problem.alpha0")
        self.alpha0 = ControlField.constant(self.shape, self.grid, np.broadcast_to(a0, (self.spec.p,)))
        self.msa = cfg.msa_config()
        out = cfg.section("output")
        self.out = Path(out["directory"])
        self.formats = set(out["formats"])
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def kind(self) -> str:
        return self.cfg.section("problem")["kind"]

    def json(self, name: str, payload: dict) -> None:
        if "json" in self.formats:
            write_json(self.out / name, self.cfg, payload)

    def csv(self, name: str, header, rows) -> None:
        if "csv" in self.formats:
            write_csv(self.out / name, header, rows)

    def optimum(self):
        if self.kind == "quadratic_toy":
            return self.alpha0.like(np.zeros(self.alpha0.values.shape)), 0.0
        a_star, j_star, reason = analysis.reference_optimum(self.spec, self.alpha0, self.W, self.msa)
        log.info("reference optimum J*=%.12g (%s)", j_star, reason)
        return a_star, j_star


def cmd_run_msa(run: Run) -> int:
    try:
        report = run_msa(run.spec, run.alpha0, run.W, run.msa)
        status = EXIT_OK
    except StalledError as exc:
        log.error("%s", exc)
        report = exc.report
        status = EXIT_RUNTIME
    rows = [(r.iter, r.J, r.grad_norm_sq, r.step_norm_sq, r.tau_used) for r in report.records]
    run.csv("msa_trace.csv", ["iter", "J", "grad_norm_sq", "step_norm_sq", "tau_used"], rows)
    run.json("msa_report.json", {"reason": report.reason, "iterations": len(report.records) - 1,
                                 "final_J": report.records[-1].J,
                                 "final_grad_norm_sq": report.records[-1].grad_norm_sq})
    return status


def cmd_run_flow(run: Run) -> int:
    f = run.cfg.section("flow")
    traj = run_gradient_flow(run.spec, run.alpha0, run.W, f["S"], f["tau"], f["scheme"], run.msa)
    run.csv("flow_trace.csv", ["s", "J", "grad_norm_sq"],
            zip(traj.s_nodes, traj.J_trace, traj.grad_norm_sq_trace))
    run.json("flow_report.json", {"scheme": traj.scheme, "tau": traj.tau, "n_steps": traj.n_steps,
                                  "final_J": traj.J_trace[-1], "final_grad_norm_sq": traj.grad_norm_sq_trace[-1]})
    return EXIT_OK


def _verdict(run: Run, name: str, passed: bool, payload: dict) -> int:
    run.json(f"{name}.json", {"check": name, "passed": bool(passed), **payload})
    log.info("%s: %s", name, "pass" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_verify(run: Run, name: str) -> int:
    v = run.cfg.section("verify")
    f = run.cfg.section("flow")
    spec, W, a0 = run.spec, run.W, run.alpha0
    toy = run.kind == "quadratic_toy"
    if name == "tau-rate":
        exact = (lambda s: a0.like(a0.values * np.exp(-2.0 * s))) if toy else None
        rep = analysis.verify_tau_rate(spec, a0, W, f["S"], v["tau_list"], run.msa, exact=exact, scheme=f["scheme"])
        lo, hi = (0.9, 1.1) if toy else (0.7, 1.3)
        ok = lo <= rep.fit.slope <= hi
        run.json("rate_fit.json", {"slope": rep.fit.slope, "intercept": rep.fit.intercept,
                                   "r_squared": rep.fit.r_squared, "pairs": rep.fit.pairs, "window": [lo, hi]})
        return _verdict(run, name, ok, {"report": rep, "window": [lo, hi]})
    if name == "sublinear":
        a_star, j_star = run.optimum()
        rep = analysis.verify_sublinear_rate(spec, a0, W, v["S_list"], a_star, j_star, run.msa, tau=f["tau"],
                                             scheme=f["scheme"])
        return _verdict(run, name, rep.all_ok, {"report": rep, "J_star": j_star})
    if name == "exponential":
        a_star, j_star = run.optimum()
        rep = analysis.verify_exponential_rate(spec, a0, W, v["S_list"], a_star, j_star, v["eta"], run.msa,
                                               tau=f["tau"], scheme=f["scheme"])
        return _verdict(run, name, rep.rate_ok and rep.consistent, {"report": rep, "J_star": j_star})
    if name == "grad-vanishing":
        rep = analysis.verify_gradient_vanishing(spec, a0, W, v["S_list"], run.msa, tau=f["tau"],
                                                 scheme=f["scheme"], threshold=v["threshold"])
        return _verdict(run, name, rep.final_ok and rep.integral_ok, {"report": rep})
    if name == "energy-identity":
        traj = run_gradient_flow(spec, a0, W, f["S"], f["tau"], f["scheme"], run.msa)
        rep = energy_identity_check(traj)
        rtol = v["energy_rtol"]
        ok = rep.n_eligible > 0 and rep.max_rel_err <= rtol
        return _verdict(run, name, ok, {"max_rel_err": rep.max_rel_err if rep.n_eligible else None,
                                        "n_eligible": rep.n_eligible, "note": rep.note, "rtol": rtol})
    if name == "gap-bound":
        rng = np.random.Generator(np.random.Philox(key=run.cfg.section("ensemble")["seed"] + 1))
        reports = []
        for _ in range(v["n_pairs"]):
            beta = analysis.random_direction(W, spec.p, rng)
            theta = analysis.random_direction(W, spec.p, rng)
            reports.append(gap_bound_check(spec, W, run.msa, beta.like(0.3 * beta.values),
                                           theta.like(0.3 * theta.values)))
        return _verdict(run, name, all(r.satisfied for r in reports), {"pairs": reports})
    raise ConfigError(f"unknown check {name!r}")


def cmd_validate_bsde(run: Run) -> int:
    v = run.cfg.section("verify")
    params = run.cfg.section("problem")["params"]
    if run.kind != "lq_modified":
        raise ConfigError("validate-bsde needs problem.kind = lq_modified (the analytic oracle)", "problem.kind")
    shape = EnsembleShape(v["bsde_n_paths"])
    W = sample_brownian(run.cfg.section("ensemble")["seed"], shape, run.grid)
    rep = analysis.validate_bsde(params, W, basis=run.msa.basis)
    det = analysis.validate_bsde_deterministic(params, W, basis=run.msa.basis)
    ok = rep.y_rel_rms <= 0.02 and rep.z_rel_rms <= 0.05 and det <= 1e-3 and not rep.oracle_warning
    return _verdict(run, "validate-bsde", ok, {"report": rep, "deterministic_rel_rms": det,
                                               "limits": {"Y": 0.02, "Z": 0.05, "deterministic": 1e-3}})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--seed", type=int, help="noise seed (overrides ensemble.seed)")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths (overrides ensemble.n_paths)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msaflow", description="Proximal successive approximations and gradient "
                                                            "flows for stochastic control.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run-msa", parents=[common], help="run the proximal iteration and write msa_trace.csv")
    sub.add_parser("run-flow", parents=[common], help="integrate the gradient flow and write flow_trace.csv")
    ver = sub.add_parser("verify", parents=[common], help="run one convergence check")
    ver.add_argument("check", choices=VERIFY_NAMES)
    sub.add_parser("validate-bsde", parents=[common], help="compare the adjoint solver with analytic oracles")
    sub.add_parser("defaults", help="print the default configuration")
    return p


def load_config(args) -> RunConfig:
    cfg = parse_config(args.config.read_text()) if args.config else default_config()
    return with_overrides(cfg, seed=args.seed, n_paths=args.paths, directory=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(dump_config(default_config()))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        # expected once the control becomes a function of the state
        warnings.filterwarnings("ignore", message="rank-deficient regression")
    try:
        run = Run(load_config(args))
        if args.command == "run-msa":
            return cmd_run_msa(run)
        if args.command == "run-flow":
            return cmd_run_flow(run)
        if args.command == "verify":
            return cmd_verify(run, args.check)
        return cmd_validate_bsde(run)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except NonFiniteOutput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
