"""Proximal successive approximations and gradient flows for stochastic control.

The forward state is simulated by Euler-Maruyama on one shared Brownian
ensemble, the adjoint pair ``(Y, Z)`` by least-squares Monte Carlo, and the
control is updated pointwise through the Hamiltonian.
"""

from .analysis import (
    fit_rate,
    gateaux_check,
    reference_optimum,
    verify_exponential_rate,
    verify_gradient_vanishing,
    verify_sublinear_rate,
    verify_tau_rate,
)
from .bsde import RegressionBasis, residual_check, solve_adjoint_lq_analytic, solve_adjoint_lsmc
from .core import (
    AdjointSolution,
    BrownianEnsemble,
    ControlField,
    ConvergenceFailureError,
    EnsembleShape,
    InvalidArgumentError,
    NumericalBlowupError,
    StatePaths,
    TimeGrid,
    control_inner,
    control_norm_sq,
    make_time_grid,
    sample_brownian,
)
from .flow import FlowTrajectory, energy_identity_check, gap_bound_check, interpolate_controls, run_gradient_flow
from .msa import MsaConfig, RunReport, StalledError, run_msa
from .problem import (
    EXAMPLES,
    ProblemSpec,
    check_derivatives,
    example_logistic,
    example_lq_modified,
    example_quadratic_toy,
    example_quartic,
    hamiltonian,
)
from .prox import explicit_step_point, prox_step_point, update_control
from .sde import estimate_cost, simulate_forward

__version__ = "0.1.0"
