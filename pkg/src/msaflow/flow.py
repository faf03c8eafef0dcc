"""Gradient flow of the cost in flow time ``s``.

A flow step of size ``tau`` is either explicit, ``alpha - tau D_a H``, or
implicit (one proximal update).  Scalars are recorded at every node.  Control
fields are kept at every ``store_every``-th node, and always at both ends.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import RegressionBasis
from .core import BrownianEnsemble, ControlField, InvalidArgumentError, path_inner, standard_error
from .msa import MsaConfig, StalledError, State, evaluate
from .problem import ProblemSpec
from .prox import check_tau, update_control

log = logging.getLogger(__name__)

_NODE_RTOL = 1e-9


@dataclass
class FlowTrajectory:
    s_nodes: np.ndarray
    J_trace: np.ndarray
    grad_norm_sq_trace: np.ndarray
    J_se_trace: np.ndarray
    controls: dict = field(repr=False)
    scheme: str = "explicit"
    tau: float = 0.0

    @property
    def S(self) -> float:
        return float(self.s_nodes[-1])

    @property
    def n_steps(self) -> int:
        return len(self.s_nodes) - 1

    @property
    def stored_nodes(self) -> list:
        return sorted(self.controls)

    def control_at_node(self, n: int) -> ControlField:
        try:
            return self.controls[n]
        except KeyError:
            raise InvalidArgumentError(f"control at flow node {n} was not stored (store_every too coarse)") from None

    @property
    def final_control(self) -> ControlField:
        return self.controls[self.n_steps]


def flow_steps(S: float, tau: float) -> tuple[int, float]:
    """Number of steps ``ceil(S / tau)`` and the step ``S / N`` actually used."""
    if not S > 0 or not tau > 0:
        raise InvalidArgumentError(f"S and tau must be positive, got S={S!r}, tau={tau!r}")
    n = max(1, math.ceil(S / tau - 1e-9))
    return n, S / n


def run_gradient_flow(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, S: float, tau: float,
                      scheme: str = "explicit", cfg: MsaConfig | None = None, *, store_every: int | None = None,
                      backtrack: bool = False, observer=None) -> FlowTrajectory:
    """Integrate the flow on ``[0, S]`` with ``N = ceil(S / tau)`` equal steps.

    ``observer(n, s, alpha)``, if given, sees every node's control whether or
    not it is stored.

    With ``backtrack`` (implicit scheme only) a step that raises the cost is
    replaced by two half steps, recursively, so node times stay on the grid.
    """
    if scheme not in ("explicit", "implicit"):
        raise InvalidArgumentError(f"scheme must be 'explicit' or 'implicit', got {scheme!r}")
    if backtrack and scheme != "implicit":
        raise InvalidArgumentError("backtracking is only defined for the implicit scheme")
    cfg = cfg or MsaConfig()
    n_steps, h = flow_steps(S, tau)
    if scheme == "implicit":
        check_tau(spec, h)
    if alpha0.grid != W.grid or alpha0.shape.n_paths != W.shape.n_paths:
        raise InvalidArgumentError("alpha0 and W must share grid and path count")
    if store_every is None:
        store_every = max(1, n_steps // 100)
    if store_every < 1:
        raise InvalidArgumentError("store_every must be >= 1")

    basis = cfg.basis

    def advance(state: State, step: float) -> State:
        if scheme == "explicit":
            return evaluate(spec, state.alpha.like(state.alpha.values - step * state.grad), W, basis)
        new = evaluate(spec, update_control(spec, state.alpha, state.X, state.sol, step, "implicit",
                                            cfg.tol, cfg.max_iter), W, basis)
        if not backtrack or new.J <= state.J:
            return new
        if step / 2 < cfg.tau_min:
            raise StalledError(f"flow step could not decrease the cost (J={state.J:.12g})", None)
        return advance(advance(state, step / 2), step / 2)

    state = evaluate(spec, alpha0, W, basis)
    J = [state.J]
    G = [state.grad_norm_sq]
    SE = [standard_error(state.costs)]
    controls = {0: alpha0}
    if observer is not None:
        observer(0, 0.0, alpha0)
    for n in range(1, n_steps + 1):
        state = advance(state, h)
        if observer is not None:
            observer(n, n * h, state.alpha)
        J.append(state.J)
        G.append(state.grad_norm_sq)
        SE.append(standard_error(state.costs))
        if n % store_every == 0 or n == n_steps:
            controls[n] = state.alpha
        log.debug("flow step %d/%d: J=%.10g |D_aH|^2=%.3e", n, n_steps, J[-1], G[-1])
    return FlowTrajectory(np.arange(n_steps + 1) * h, np.array(J), np.array(G), np.array(SE), controls, scheme, h)


def interpolate_controls(traj: FlowTrajectory, s: float, mode: str = "hat") -> ControlField:
    """Piecewise-linear (``hat``) or piecewise-constant (``plus``/``minus``) interpolant at flow time ``s``.

    On ``((n-1) tau, n tau)`` the ``plus`` field is iterate ``n`` and ``minus``
    is iterate ``n - 1``.  At a node all three return the stored iterate.
    """
    if mode not in ("hat", "plus", "minus"):
        raise InvalidArgumentError(f"mode must be 'hat', 'plus' or 'minus', got {mode!r}")
    if not (0.0 <= s <= traj.S * (1 + _NODE_RTOL)):
        raise InvalidArgumentError(f"s={s!r} outside [0, {traj.S}]")
    u = s / traj.tau
    k = round(u)
    if abs(u - k) <= _NODE_RTOL * max(1.0, u):
        return traj.control_at_node(min(k, traj.n_steps))
    n = math.ceil(u)
    if mode == "plus":
        return traj.control_at_node(n)
    lo = traj.control_at_node(n - 1)
    if mode == "minus":
        return lo
    hi = traj.control_at_node(n)
    w = u - (n - 1)
    return lo.like((1 - w) * lo.values + w * hi.values)


@dataclass(frozen=True)
class EnergyReport:
    max_rel_err: float
    n_eligible: int
    rel_errors: np.ndarray = field(repr=False)
    note: str = ""


def energy_identity_check(traj: FlowTrajectory, floor: float = 1e-6) -> EnergyReport:
    """Compare the centred difference of ``J`` with ``-|D_a H|^2`` at interior nodes."""
    if len(traj.s_nodes) < 3:
        raise InvalidArgumentError("energy identity needs at least 3 flow nodes")
    J = traj.J_trace
    g = traj.grad_norm_sq_trace[1:-1]
    dJ = (J[2:] - J[:-2]) / (2 * traj.tau)
    ok = g >= floor
    if not ok.any():
        return EnergyReport(float("nan"), 0, np.array([]), "no eligible nodes")
    rel = np.abs(dJ[ok] + g[ok]) / g[ok]
    return EnergyReport(float(np.max(rel)), int(ok.sum()), rel)


@dataclass(frozen=True)
class GapReport:
    lhs: float
    rhs: float
    se: float
    satisfied: bool


def gap_bound_check(spec: ProblemSpec, W: BrownianEnsemble, cfg: MsaConfig | None, beta: ControlField,
                    theta: ControlField) -> GapReport:
    """Evaluate ``J(beta) - J(theta) <= <D_a H at beta, beta - theta>`` with 3-standard-error slack.

    The slack uses the per-path spread of ``lhs - rhs``, which is small under
    shared noise.  A violated inequality is reported, never raised.
    """
    basis = (cfg or MsaConfig()).basis
    sb = evaluate(spec, beta, W, basis)
    st = evaluate(spec, theta, W, basis)
    lhs_paths = sb.costs - st.costs
    rhs_paths = path_inner(sb.grad, beta.values - theta.values, beta.grid.dt)
    lhs = float(np.mean(lhs_paths))
    rhs = float(np.mean(rhs_paths))
    se = standard_error(lhs_paths - rhs_paths)
    return GapReport(lhs, rhs, se, bool(lhs <= rhs + 3 * se))


def integral_identity(traj: FlowTrajectory) -> dict:
    """Trapezoid integral of ``|D_a H|^2`` over the flow against the cost drop."""
    integral = float(np.trapezoid(traj.grad_norm_sq_trace, dx=traj.tau)) if hasattr(np, "trapezoid") else float(
        np.trapz(traj.grad_norm_sq_trace, dx=traj.tau))
    drop = float(traj.J_trace[0] - traj.J_trace[-1])
    rel = abs(integral - drop) / abs(drop) if drop != 0 else float("inf")
    return {"integral": integral, "cost_drop": drop, "rel_err": rel}


__all__ = [
    "FlowTrajectory", "run_gradient_flow", "interpolate_controls", "energy_identity_check", "EnergyReport",
    "gap_bound_check", "GapReport", "integral_identity", "flow_steps", "RegressionBasis",
]
