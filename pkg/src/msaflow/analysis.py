"""Rate fitting and executable convergence checks.

All checks share one Brownian ensemble between the runs they compare, so
differences of estimators carry small per-path noise.  Slack terms are three
standard errors of the relevant per-path differences.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    BrownianEnsemble,
    ControlField,
    EnsembleShape,
    InvalidArgumentError,
    control_distance,
    control_norm_sq,
    path_inner,
    standard_error,
)
from .flow import FlowTrajectory, flow_steps, integral_identity, interpolate_controls, run_gradient_flow
from .msa import MsaConfig, StalledError, evaluate, run_msa
from .problem import ProblemSpec, grad_a_H
from .sde import path_costs, simulate_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateFit:
    pairs: tuple
    slope: float
    intercept: float
    r_squared: float


def _linfit(u, v):
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    slope, intercept = np.polyfit(u, v, 1)
    pred = slope * u + intercept
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    ss_res = float(np.sum((v - pred) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_rate(pairs) -> RateFit:
    """Least-squares line through ``(log scale, log error)``."""
    pairs = tuple((float(s), float(e)) for s, e in pairs)
    if len(pairs) < 3:
        raise InvalidArgumentError(f"need at least 3 (scale, error) pairs, got {len(pairs)}")
    arr = np.array(pairs)
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("scales and errors must be positive and finite")
    return RateFit(pairs, *_linfit(np.log(arr[:, 0]), np.log(arr[:, 1])))


def fit_exponential(pairs) -> RateFit:
    """Least-squares line through ``(s, log gap)``; the slope is the decay rate."""
    pairs = tuple((float(s), float(e)) for s, e in pairs)
    if len(pairs) < 3:
        raise InvalidArgumentError(f"need at least 3 (s, gap) pairs, got {len(pairs)}")
    arr = np.array(pairs)
    if not np.all(arr[:, 1] > 0):
        raise InvalidArgumentError("gaps must be positive for a log-linear fit")
    return RateFit(pairs, *_linfit(arr[:, 0], np.log(arr[:, 1])))


# --- discretisation rate in tau ---------------------------------------------

@dataclass(frozen=True)
class TauRateReport:
    fit: RateFit
    errors: dict
    tau_ref: float | None


def _node_index(traj: FlowTrajectory, s: float) -> int:
    n = round(s / traj.tau)
    if abs(n * traj.tau - s) > 1e-9 * max(1.0, s):
        raise InvalidArgumentError(f"s={s} is not a node of the trajectory with step {traj.tau}")
    return n


def verify_tau_rate(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, S: float, tau_list,
                    cfg: MsaConfig | None = None, *, exact=None, scheme: str = "implicit",
                    refine: int = 16) -> TauRateReport:
    """Error of the three interpolants against a reference flow, fitted against ``tau``.

    For each ``tau`` the error is the largest, over a grid of spacing
    ``min(tau_list) / refine``, of the summed control distances of the linear,
    ``plus`` and ``minus`` interpolants to the reference.  The reference is
    ``exact(s)`` when given, else an explicit flow on that grid.
    """
    taus = sorted({float(t) for t in tau_list}, reverse=True)
    if len(taus) < 3:
        raise InvalidArgumentError("tau_list needs at least 3 distinct entries")
    runs = [run_gradient_flow(spec, alpha0, W, S, tau, scheme, cfg, store_every=1) for tau in taus]
    n_fine, h_fine = flow_steps(S, taus[-1])
    h_ref = h_fine / refine
    errors = {traj.tau: 0.0 for traj in runs}

    def observe(n, s, target):
        for traj in runs:
            total = sum(control_distance(interpolate_controls(traj, s, m), target) for m in ("hat", "plus", "minus"))
            errors[traj.tau] = max(errors[traj.tau], total)

    if exact is None:
        run_gradient_flow(spec, alpha0, W, S, h_ref, "explicit", cfg, store_every=n_fine * refine,
                          observer=observe)
        tau_ref = h_ref
    else:
        for j in range(n_fine * refine + 1):
            observe(j, j * h_ref, exact(j * h_ref))
        tau_ref = None
    for tau, err in errors.items():
        log.info("tau=%g: interpolant error %.4e", tau, err)
    return TauRateReport(fit_rate(sorted(errors.items())), errors, tau_ref)


# --- reference optimum -------------------------------------------------------

def reference_optimum(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, cfg: MsaConfig | None = None):
    """Run the proximal iteration to its stopping rule or to the noise floor.

    Returns ``(alpha_star, J_star, reason)``.  Stalling is how a converged run
    ends once cost changes fall below the resolution of the shared noise, so it
    is treated as convergence here.
    """
    cfg = cfg or MsaConfig(tau0=0.2, max_outer=500, stop_dJ=1e-12)
    try:
        report = run_msa(spec, alpha0, W, cfg)
    except StalledError as exc:
        report = exc.report
    return report.control, float(report.records[-1].J), report.reason


def _gaps(spec, traj, S_list, W, alpha_star, J_star):
    star_costs = path_costs(spec, alpha_star, simulate_forward(spec, alpha_star, W))
    out = []
    for S in S_list:
        a = traj.control_at_node(_node_index(traj, S))
        costs = path_costs(spec, a, simulate_forward(spec, a, W))
        out.append((S, float(np.mean(costs)) - J_star, standard_error(costs - star_costs),
                    control_norm_sq(a - alpha_star)))
    return out


def _run_storing(spec, alpha0, W, S_list, tau, scheme, cfg):
    S_list = sorted(float(s) for s in S_list)
    if not S_list or S_list[0] <= 0:
        raise InvalidArgumentError("S_list must hold positive flow times")
    n, h = flow_steps(S_list[-1], tau)
    ratios = [S / h for S in S_list]
    if any(abs(r - round(r)) > 1e-9 * max(1.0, r) for r in ratios):
        raise InvalidArgumentError(f"every S in {S_list} must be a multiple of the flow step {h}")
    step = int(np.gcd.reduce([round(r) for r in ratios]))
    return S_list, run_gradient_flow(spec, alpha0, W, S_list[-1], h, scheme, cfg, store_every=step)


# --- 1/S rate ----------------------------------------------------------------

@dataclass(frozen=True)
class SublinearReport:
    S: tuple
    gap: tuple
    envelope: tuple
    se: tuple
    bound_ok: tuple
    rate_fit: RateFit | None
    note: str = ""

    @property
    def all_ok(self) -> bool:
        return all(self.bound_ok)


def verify_sublinear_rate(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, S_list,
                          alpha_star: ControlField, J_star: float, cfg: MsaConfig | None = None, *,
                          tau: float = 0.02, scheme: str = "implicit") -> SublinearReport:
    """Check ``J(alpha_S) - J* <= |alpha0 - alpha*|^2 / S`` at each ``S`` with 3-SE slack.

    The slack uses the spread of per-path cost differences to ``alpha_star``
    on ``W``, so ``J_star`` should be the cost of ``alpha_star`` on the same
    ensemble.
    """
    S_list, traj = _run_storing(spec, alpha0, W, S_list, tau, scheme, cfg)
    dist0 = control_norm_sq(alpha0 - alpha_star)
    rows = _gaps(spec, traj, S_list, W, alpha_star, float(J_star))
    gap = tuple(r[1] for r in rows)
    se = tuple(r[2] for r in rows)
    env = tuple(dist0 / S for S in S_list)
    ok = tuple(bool(g <= e + 3 * s) for g, e, s in zip(gap, env, se))
    positive = [(S, g) for S, g in zip(S_list, gap) if g > 0]
    fit = fit_rate(positive) if len(positive) >= 3 else None
    note = "" if fit else "fewer than 3 positive gaps; no rate fit"
    return SublinearReport(tuple(S_list), gap, env, se, ok, fit, note)


# --- exponential rate ----------------------------------------------------------

@dataclass(frozen=True)
class ExponentialReport:
    S: tuple
    cost_gap: tuple
    control_gap_sq: tuple
    cost_fit: RateFit | None
    control_fit: RateFit
    eta: float
    rate_ok: bool
    consistent: bool


def verify_exponential_rate(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, S_list,
                            alpha_star: ControlField, J_star: float, eta: float, cfg: MsaConfig | None = None, *,
                            tau: float = 0.02, scheme: str = "implicit", consistency: float = 0.3) -> ExponentialReport:
    """Log-linear decay of the cost gap and the squared control gap in ``S``.

    ``rate_ok`` asks both slopes to be at most ``-eta (1 - consistency)``;
    ``consistent`` asks them to agree within ``consistency`` relative.  The
    cost fit is skipped (``None``) when the cost gap is identically zero, as
    for a problem whose cost is flat at the optimum to first order.
    """
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be positive, got {eta!r}")
    S_list, traj = _run_storing(spec, alpha0, W, S_list, tau, scheme, cfg)
    rows = _gaps(spec, traj, S_list, W, alpha_star, float(J_star))
    cgap = tuple(r[1] for r in rows)
    agap = tuple(r[3] for r in rows)
    control_fit = fit_exponential(zip(S_list, agap))
    cost_fit = fit_exponential(zip(S_list, cgap)) if all(g > 0 for g in cgap) else None
    bound = -eta * (1 - consistency)
    rate_ok = control_fit.slope <= bound and (cost_fit is None or cost_fit.slope <= bound)
    consistent = cost_fit is None or abs(cost_fit.slope - control_fit.slope) <= consistency * abs(control_fit.slope)
    return ExponentialReport(tuple(S_list), cgap, agap, cost_fit, control_fit, float(eta), bool(rate_ok),
                             bool(consistent))


# --- gradient vanishing -------------------------------------------------------

@dataclass(frozen=True)
class VanishingReport:
    S: tuple
    grad_norm_sq: tuple
    monotone_trend: bool
    final_ok: bool
    integral: float
    cost_drop: float
    integral_rel_err: float
    integral_ok: bool
    threshold: float


def verify_gradient_vanishing(spec: ProblemSpec, alpha0: ControlField, W: BrownianEnsemble, S_list,
                              cfg: MsaConfig | None = None, *, tau: float = 0.01, scheme: str = "implicit",
                              threshold: float = 1e-3, integral_rtol: float = 0.1,
                              trajectory: FlowTrajectory | None = None) -> VanishingReport:
    """Run the flow to ``max(S_list)`` and watch ``|D_a H|^2`` at each listed ``S``.

    The trend flag asks the sampled values to be non-increasing.  The integral
    of ``|D_a H|^2`` over ``[0, S]`` is compared with ``J(alpha_0)`` minus the
    smallest recorded cost.
    """
    S_list = sorted(float(s) for s in S_list)
    traj = trajectory or run_gradient_flow(spec, alpha0, W, S_list[-1], tau, scheme, cfg,
                                           store_every=flow_steps(S_list[-1], tau)[0])
    g = tuple(float(traj.grad_norm_sq_trace[_node_index(traj, S)]) for S in S_list)
    trend = all(b <= a for a, b in zip(g, g[1:]))
    ident = integral_identity(traj)
    drop = float(traj.J_trace[0] - np.min(traj.J_trace))
    rel = abs(ident["integral"] - drop) / abs(drop) if drop > 0 else (0.0 if ident["integral"] == 0 else np.inf)
    return VanishingReport(tuple(S_list), g, bool(trend), bool(g[-1] <= threshold), ident["integral"], drop,
                           float(rel), bool(rel <= integral_rtol), float(threshold))


# --- discrete energy inequality ----------------------------------------------

@dataclass(frozen=True)
class EnergyInequalityReport:
    C: float
    implied: tuple
    n_eligible: int
    certified: bool


def energy_inequality_fit(report, floor: float = 1e-6) -> EnergyInequalityReport:
    """Smallest ``C`` with ``J_n - J_{n+1} >= (1/(2 tau_n) - C) |alpha_{n+1} - alpha_n|^2``.

    Only iterations with ``grad_norm_sq >= floor`` and a nonzero step enter:
    below that the regressed gradient no longer describes the sampled cost.
    ``certified`` means ``C < 1/(2 tau)`` at every eligible iteration, so the
    fitted inequality guarantees descent.
    """
    J = report.column("J")
    g = report.column("grad_norm_sq")
    st = report.column("step_norm_sq")
    tau = report.column("tau_used")
    implied = []
    for n in range(len(J) - 1):
        if g[n] >= floor and st[n] > 0:
            implied.append((n, 1.0 / (2 * tau[n]) - (J[n] - J[n + 1]) / st[n]))
    if not implied:
        return EnergyInequalityReport(float("nan"), (), 0, False)
    C = max(c for _, c in implied)
    certified = all(C < 1.0 / (2 * tau[n]) for n, _ in implied)
    return EnergyInequalityReport(float(C), tuple(c for _, c in implied), len(implied), bool(certified))


# --- directional derivative ---------------------------------------------------

@dataclass(frozen=True)
class GateauxReport:
    fd: float
    inner: float
    se: float
    tol: float
    ok: bool


def gateaux_check(spec: ProblemSpec, alpha: ControlField, W: BrownianEnsemble, v: ControlField,
                  eps: float = 1e-4, cfg: MsaConfig | None = None, floor: float = 1e-3) -> GateauxReport:
    """Central difference of ``J`` along ``v`` against ``E int D_a H . v dt``.

    Agreement is required within ``max(floor, 3 SE)`` where ``SE`` is the
    standard error of the per-path difference of the two estimators.
    """
    if not eps > 0:
        raise InvalidArgumentError("eps must be positive")
    basis = (cfg or MsaConfig()).basis
    state = evaluate(spec, alpha, W, basis)
    plus = alpha + eps * v
    minus = alpha - eps * v
    fd_paths = (path_costs(spec, plus, simulate_forward(spec, plus, W))
                - path_costs(spec, minus, simulate_forward(spec, minus, W))) / (2 * eps)
    inner_paths = path_inner(state.grad, v.values, alpha.grid.dt)
    fd = float(np.mean(fd_paths))
    inner = float(np.mean(inner_paths))
    se = standard_error(fd_paths - inner_paths)
    tol = max(floor, 3 * se)
    return GateauxReport(fd, inner, se, tol, bool(abs(fd - inner) <= tol))


def random_direction(W: BrownianEnsemble, p: int, rng: np.random.Generator) -> ControlField:
    """Adapted direction ``r0 + r1 cos(pi t / T) + r2 W^1_t`` with Gaussian coefficients."""
    grid = W.grid
    t = grid.nodes[:-1]
    w1 = W.paths()[:, :-1, :1]
    r = rng.standard_normal((3, p))
    vals = r[0] + r[1] * np.cos(np.pi * t / grid.horizon_T)[None, :, None] + r[2] * w1
    shape = EnsembleShape(W.shape.n_paths, W.shape.d, W.shape.d_w, p)
    return ControlField(shape, grid, vals)


@dataclass(frozen=True)
class MonotonicityReport:
    worst_margin: float
    n_draws: int
    ok: bool
    lam: float = 0.0


def lambda_monotonicity_check(spec: ProblemSpec, n_draws: int = 100, seed: int = 0, box: float = 2.0,
                              lam: float | None = None) -> MonotonicityReport:
    """``<D_a H(a) - D_a H(a'), a - a'> >= -lam |a - a'|^2`` at random points.

    ``worst_margin`` is the smallest value of left minus right side; ``ok``
    means it is non-negative up to 1e-12.
    """
    if n_draws < 1:
        raise InvalidArgumentError("n_draws must be >= 1")
    lam = spec.lambda_hint if lam is None else lam
    rng = np.random.Generator(np.random.Philox(key=seed))
    t = rng.uniform(0.0, 1.0)
    x = rng.uniform(-box, box, (n_draws, spec.d))
    y = rng.uniform(-box, box, (n_draws, spec.d))
    z = rng.uniform(-box, box, (n_draws, spec.d, spec.d_w))
    a = rng.uniform(-box, box, (n_draws, spec.p))
    b = rng.uniform(-box, box, (n_draws, spec.p))
    da = a - b
    lhs = np.sum((grad_a_H(spec, t, x, y, z, a) - grad_a_H(spec, t, x, y, z, b)) * da, axis=-1)
    margin = lhs + lam * np.sum(da * da, axis=-1)
    worst = float(np.min(margin))
    return MonotonicityReport(worst, n_draws, bool(worst >= -1e-12), float(lam))


def splice_future_noise(W: BrownianEnsemble, k: int, seed: int) -> BrownianEnsemble:
    """Copy of ``W`` with increments from step ``k`` on replaced by fresh draws."""
    if not 0 <= k <= W.grid.n_steps:
        raise InvalidArgumentError(f"k={k} outside [0, {W.grid.n_steps}]")
    fresh = np.random.Generator(np.random.Philox(key=int(seed))).standard_normal(W.increments.shape)
    inc = W.increments.copy()
    inc[:, k:] = fresh[:, k:] * np.sqrt(W.grid.dt)
    return W.with_increments(inc)


# --- adjoint solver validation -------------------------------------------------

@dataclass(frozen=True)
class BsdeValidation:
    y_rel_rms: float
    z_rel_rms: float
    oracle_warning: bool


def _rel_rms(u, v):
    den = float(np.mean(v * v))
    return float(np.sqrt(np.mean((u - v) ** 2) / den)) if den > 0 else float(np.sqrt(np.mean(u * u)))


def validate_bsde(params: dict, W: BrownianEnsemble, gain=-0.5, offset=0.0, basis=None) -> BsdeValidation:
    """LSMC adjoint against the Riccati oracle under a linear feedback control.

    ``params`` are those of the modified linear-quadratic example; the oracle
    is exact only while paths stay in the unit ball, which the report flags.
    Under feedback the control is a function of the state, so the regression
    features are collinear; the ridge handles that and its warning is muted.
    """
    from .bsde import solve_adjoint_lq_analytic, solve_adjoint_lsmc
    from .problem import example_lq_modified
    from .sde import simulate_feedback

    spec = example_lq_modified(params)
    alpha, X = simulate_feedback(spec, gain, offset, W)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solve_adjoint_lsmc(spec, alpha, X, W, basis)
        ref = solve_adjoint_lq_analytic(params, (np.reshape(gain, (1, 1)), np.reshape(offset, (1,))), X)
    return BsdeValidation(_rel_rms(sol.Y, ref.Y), _rel_rms(sol.Z, ref.Z), bool(ref.oracle_warning))


def validate_bsde_deterministic(params: dict, W: BrownianEnsemble, alpha_value=0.3, basis=None) -> float:
    """Zero-noise case: LSMC against the fine backward ODE solve, relative RMS in ``Y``."""
    from .bsde import solve_adjoint_deterministic, solve_adjoint_lsmc
    from .problem import example_lq_modified

    prm = dict(params)
    prm.update(C=0.0, D=0.0, gamma=0.0)
    spec = example_lq_modified(prm)
    alpha = ControlField.constant(EnsembleShape(W.shape.n_paths, 1, 1, 1), W.grid, alpha_value)
    X = simulate_forward(spec, alpha, W)
    sol = solve_adjoint_lsmc(spec, alpha, X, W, basis)
    ref = solve_adjoint_deterministic(spec, alpha, X)
    return _rel_rms(sol.Y, ref.Y)
