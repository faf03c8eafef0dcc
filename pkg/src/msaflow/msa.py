"""Modified method of successive approximations.

Each outer iteration simulates the state, solves the adjoint equation,
and replaces the control by the pointwise proximal minimiser of the
Hamiltonian.  Costs are compared on one shared Brownian ensemble, so a
backtracking rule on ``tau`` makes the recorded cost sequence exactly
non-increasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bsde import RegressionBasis, solve_adjoint_lsmc
from .core import (
    AdjointSolution,
    BrownianEnsemble,
    ControlField,
    InvalidArgumentError,
    StatePaths,
    control_norm_sq,
    path_inner,
)
from .problem import ProblemSpec
from .prox import DEFAULT_MAX_ITER, DEFAULT_TOL, check_tau, gradient_field, update_control
from .sde import path_costs, simulate_forward

log = logging.getLogger(__name__)


class StalledError(RuntimeError):
    """Backtracking drove ``tau`` below its floor without a cost decrease."""

    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MsaConfig:
    tau0: float = 0.2
    max_outer: int = 200
    stop_dJ: float = 1e-10
    backtrack: bool = True
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    mode: str = "implicit"
    tau_min: float = 1e-8

    def __post_init__(self):
        if not self.tau0 > 0:
            raise InvalidArgumentError(f"tau0 must be positive, got {self.tau0!r}")
        if self.mode not in ("implicit", "explicit"):
            raise InvalidArgumentError(f"mode must be 'implicit' or 'explicit', got {self.mode!r}")
        if int(self.max_outer) != self.max_outer or self.max_outer < 1:
            raise InvalidArgumentError("max_outer must be a positive integer")

    def for_problem(self, spec: ProblemSpec) -> "MsaConfig":
        """Validate ``tau0`` against the problem's semiconvexity constant."""
        if self.mode == "implicit":
            check_tau(spec, self.tau0)
        return self


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    J: float
    grad_norm_sq: float
    step_norm_sq: float
    tau_used: float


@dataclass
class RunReport:
    records: list
    control: ControlField
    reason: str
    states: list = field(default_factory=list, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


@dataclass(frozen=True, eq=False)
class State:
    """A control together with everything derived from it on a fixed noise sample."""

    alpha: ControlField
    X: StatePaths
    sol: AdjointSolution
    costs: np.ndarray
    grad: np.ndarray

    @property
    def J(self) -> float:
        return float(np.mean(self.costs))

    @property
    def grad_norm_sq(self) -> float:
        return float(np.mean(path_inner(self.grad, self.grad, self.alpha.grid.dt)))


def evaluate(spec: ProblemSpec, alpha: ControlField, W: BrownianEnsemble,
             basis: RegressionBasis | None = None) -> State:
    """Forward simulation, adjoint solve, realised costs and pointwise gradients."""
    X = simulate_forward(spec, alpha, W)
    sol = solve_adjoint_lsmc(spec, alpha, X, W, basis)
    return State(alpha, X, sol, path_costs(spec, alpha, X), gradient_field(spec, alpha, X, sol))


def grad_norm_estimator(spec: ProblemSpec, alpha: ControlField, X: StatePaths, sol: AdjointSolution) -> float:
    """Discrete ``E int_0^T |D_a H(t, X_t, Y_t, Z_t, alpha_t)|^2 dt``."""
    return control_norm_sq(alpha.like(gradient_field(spec, alpha, X, sol)))


def step(spec: ProblemSpec, state: State, tau: float, mode: str, cfg: MsaConfig) -> ControlField:
    return update_control(spec, state.alpha, state.X, state.sol, tau, mode, cfg.tol, cfg.max_iter)


def run_msa(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, cfg: MsaConfig | None = None,
            *, keep_states: bool = False) -> RunReport:
    """Iterate forward solve, adjoint solve and proximal update.

    Stops when ``0 <= J(alpha^n) - J(alpha^{n+1}) < cfg.stop_dJ`` or after
    ``cfg.max_outer`` updates.  With ``cfg.backtrack`` an update that raises the
    cost is redone from ``alpha^n`` with ``tau`` halved; ``tau`` stays reduced
    afterwards.  The final record carries the returned control (step 0).
    """
    cfg = (cfg or MsaConfig()).for_problem(spec)
    if alpha0.grid != W.grid or alpha0.shape.n_paths != W.shape.n_paths:
        raise InvalidArgumentError("alpha0 and W must share grid and path count")
    state = evaluate(spec, alpha0, W, cfg.basis)
    tau = cfg.tau0
    records = []
    states = [state] if keep_states else []
    reason = "max_outer"
    for n in range(cfg.max_outer):
        while True:
            new_alpha = step(spec, state, tau, cfg.mode, cfg)
            new_state = evaluate(spec, new_alpha, W, cfg.basis)
            if not cfg.backtrack or new_state.J <= state.J:
                break
            tau *= 0.5
            log.debug("iteration %d: cost rose, tau -> %g", n, tau)
            if tau < cfg.tau_min:
                records.append(IterationRecord(n, state.J, state.grad_norm_sq, 0.0, tau))
                report = RunReport(records, state.alpha, "stalled", states)
                raise StalledError(
                    f"no cost decrease at iteration {n} with tau down to {tau:.2e} "
                    f"(J={state.J:.12g}, grad_norm_sq={state.grad_norm_sq:.3e})", report)
        step_sq = control_norm_sq(new_alpha - state.alpha)
        records.append(IterationRecord(n, state.J, state.grad_norm_sq, step_sq, tau))
        decrease = state.J - new_state.J
        state = new_state
        if keep_states:
            states.append(state)
        if 0 <= decrease < cfg.stop_dJ:
            reason = "stop_dJ"
            break
    records.append(IterationRecord(len(records), state.J, state.grad_norm_sq, 0.0, tau))
    return RunReport(records, state.alpha, reason, states)


def with_tau(cfg: MsaConfig, tau: float) -> MsaConfig:
    return replace(cfg, tau0=tau)
