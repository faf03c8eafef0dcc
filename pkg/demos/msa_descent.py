"""Proximal successive approximations on the modified linear-quadratic problem.

Runs the iteration from the zero control and prints the cost, the squared
gradient norm and the step size per outer iteration.  Under shared noise the
cost column never increases.

    python3 demos/msa_descent.py [n_paths]
"""

import sys
import warnings

from msaflow.core import ControlField, EnsembleShape, make_time_grid, sample_brownian
from msaflow.msa import MsaConfig, StalledError, run_msa
from msaflow.problem import example_lq_modified


def main(n_paths: int = 10_000) -> None:
    warnings.simplefilter("ignore", RuntimeWarning)
    spec = example_lq_modified()
    W = sample_brownian(42, EnsembleShape(n_paths), make_time_grid(1.0, 50))
    alpha0 = ControlField.constant(EnsembleShape(n_paths), W.grid, 0.0)
    try:
        report = run_msa(spec, alpha0, W, MsaConfig(tau0=0.2, max_outer=200))
    except StalledError as exc:
        print(f"stalled at the Monte Carlo noise floor: {exc}")
        report = exc.report
    print(f"{'iter':>4} {'J':>16} {'|D_a H|^2':>12} {'tau':>8}")
    for r in report.records:
        print(f"{r.iter:4d} {r.J:16.12f} {r.grad_norm_sq:12.4e} {r.tau_used:8.3g}")
    print(f"stopped by {report.reason}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10_000)
