import warnings

import numpy as np
import pytest
from conftest import holdout_constant

from msaflow.analysis import random_direction, validate_bsde, validate_bsde_deterministic
from msaflow.bsde import (
    Projection,
    RegressionBasis,
    features,
    lq_riccati,
    residual_check,
    solve_adjoint_deterministic,
    solve_adjoint_lq_analytic,
    solve_adjoint_lsmc,
)
from msaflow.core import (
    AdjointSolution,
    ControlField,
    EnsembleShape,
    InvalidArgumentError,
    control_norm_sq,
    make_time_grid,
    sample_brownian,
)
from msaflow.problem import LQ_DEFAULTS, ProblemSpec, example_lq_modified
from msaflow.sde import simulate_feedback, simulate_forward

# keeps feedback paths inside the unit ball, where the Riccati oracle is exact
INSIDE = dict(x0=0.2, gamma=0.1, C=0.1, D=0.1, A=0.2)


def _ensemble(n_paths, n_steps=50, seed=1):
    return sample_brownian(seed, EnsembleShape(n_paths), make_time_grid(1.0, n_steps))


@pytest.fixture(scope="module")
def feedback_case():
    W = _ensemble(10_000)
    spec = example_lq_modified(INSIDE)
    alpha, X = simulate_feedback(spec, -0.5, 0.0, W)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lsmc = solve_adjoint_lsmc(spec, alpha, X, W)
    exact = solve_adjoint_lq_analytic(INSIDE, (np.array([[-0.5]]), np.zeros(1)), X)
    return spec, W, alpha, X, lsmc, exact


def test_basis_feature_count():
    assert RegressionBasis(degree=2).n_features(1, 1) == 6
    assert RegressionBasis(degree=3, include_control=False).n_features(2, 1) == 10
    with pytest.raises(InvalidArgumentError):
        RegressionBasis(degree=-1)


def test_zero_driver_constant_terminal():
    spec = ProblemSpec(d=1, d_w=1, p=1, x0=[0.0], sigma=lambda t, x, a: np.ones(np.shape(x) + (1,)),
                       g=lambda x: x[..., 0], Dx_g=lambda x: np.ones(np.shape(x)))
    W = _ensemble(2000)
    alpha = ControlField.constant(EnsembleShape(2000), W.grid, 0.1)
    sol = solve_adjoint_lsmc(spec, alpha, simulate_forward(spec, alpha, W), W)
    np.testing.assert_allclose(sol.Y, 1.0, atol=1e-12)
    # standard error of a plain Monte Carlo estimate of E[Y_{k+1} dW_k] / dt
    dt = W.grid.dt
    se = np.mean(np.std(sol.Y[:, 1:, 0] * W.increments[..., 0], axis=0)) / (dt * np.sqrt(2000))
    z_rms = np.sqrt(np.mean(sol.Z ** 2))
    assert z_rms <= 3 * se and z_rms <= 1e-6


def test_too_few_paths_rejected():
    spec = example_lq_modified()
    W = _ensemble(20)
    alpha = ControlField.constant(EnsembleShape(20), W.grid)
    with pytest.raises(InvalidArgumentError):
        solve_adjoint_lsmc(spec, alpha, simulate_forward(spec, alpha, W), W)


def test_deterministic_case_matches_backward_ode():
    err = validate_bsde_deterministic(INSIDE, _ensemble(500))
    assert err <= 1e-3


def test_deterministic_z_vanishes():
    prm = dict(INSIDE, C=0.0, D=0.0, gamma=0.0)
    spec = example_lq_modified(prm)
    W = _ensemble(500)
    alpha = ControlField.constant(EnsembleShape(500), W.grid, 0.3)
    sol = solve_adjoint_lsmc(spec, alpha, simulate_forward(spec, alpha, W), W)
    assert np.max(np.abs(sol.Z)) <= 1e-10


def test_lq_oracle_agreement():
    rep = validate_bsde(INSIDE, _ensemble(100_000))
    assert not rep.oracle_warning
    assert rep.y_rel_rms <= 0.02 and rep.z_rel_rms <= 0.05


def test_riccati_terminal_and_trivial_branch():
    P, phi = lq_riccati(dict(N=2.5), (np.array([[-0.3]]), np.array([0.1])), 1.0, 20)
    assert P[-1, 0, 0] == 2.5 and phi[-1, 0] == 0.0
    # constant only without state feedback; a gain K adds -P B K to the derivative
    P0, _ = lq_riccati(dict(A=0.0, C=0.0, L=0.0, N=1.7), (np.zeros((1, 1)), np.array([0.4])), 1.0, 20)
    np.testing.assert_allclose(P0[:, 0, 0], 1.7, rtol=0, atol=1e-14)


def test_riccati_scalar_closed_form():
    # with C = 0 the scalar equation P' = -(2A + BK) P - L is linear
    A, B, K, L, N, T = 0.3, 1.0, -0.5, 0.8, 1.2, 1.0
    P, _ = lq_riccati(dict(A=A, B=B, C=0.0, D=0.0, L=L, N=N), (np.array([[K]]), np.zeros(1)), T, 10)
    r = 2 * A + B * K
    t = np.linspace(0.0, T, 11)
    exact = (N + L / r) * np.exp(r * (T - t)) - L / r
    np.testing.assert_allclose(P[:, 0, 0], exact, rtol=1e-10)


def test_analytic_terminal_value(feedback_case):
    spec, W, alpha, X, lsmc, exact = feedback_case
    np.testing.assert_allclose(exact.Y[:, -1, 0], LQ_DEFAULTS["N"] * X.values[:, -1, 0], atol=1e-15)


def test_terminal_condition_exact(feedback_case):
    spec, W, alpha, X, lsmc, exact = feedback_case
    assert np.max(np.abs(lsmc.Y[:, -1] - spec.Dx_g(X.values[:, -1]))) == 0.0


def test_residuals(feedback_case):
    spec, W, alpha, X, lsmc, exact = feedback_case
    r_exact = residual_check(spec, alpha, X, W, exact).one_step_residual
    r_lsmc = residual_check(spec, alpha, X, W, lsmc).one_step_residual
    zeroed = AdjointSolution(lsmc.Y, np.zeros_like(lsmc.Z), lsmc.Y_pred)
    r_zero = residual_check(spec, alpha, X, W, zeroed).one_step_residual
    assert r_exact <= 1e-3 * np.sqrt(np.mean(exact.Y ** 2))
    assert r_lsmc <= 5 * r_exact
    assert r_zero >= 10 * r_lsmc


def test_deterministic_oracle_residual():
    # the exact backward ODE misses the one-step recursion by O(dt^2) per step
    prm = dict(INSIDE, C=0.0, D=0.0, gamma=0.0)
    spec = example_lq_modified(prm)
    W = _ensemble(100, n_steps=500)
    alpha = ControlField.constant(EnsembleShape(100), W.grid, 0.3)
    X = simulate_forward(spec, alpha, W)
    sol = solve_adjoint_deterministic(spec, alpha, X)
    rep = residual_check(spec, alpha, X, W, sol)
    assert rep.one_step_residual <= 1e-6 and rep.martingale_defect >= 0


def test_projection_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3000, 1))
    a = rng.normal(size=(3000, 1))
    proj = Projection(features(RegressionBasis(degree=2), x, a))
    v = np.sin(3 * x[:, 0]) + a[:, 0] ** 3
    once = proj(v)
    np.testing.assert_allclose(proj(once), once, atol=1e-9)


def test_adjoint_bounded():
    # comparison ODE u' = -(|A| u + L), u(T) = N bounds |Y| since |D_x f| <= L and |D_x g| <= N
    prm = dict(LQ_DEFAULTS)
    A, L, N, T = abs(prm["A"]), prm["L"], prm["N"], 1.0
    bound = N * np.exp(A * T) + L * (np.exp(A * T) - 1) / A
    spec = example_lq_modified()
    W = _ensemble(10_000, seed=5)
    alpha = random_direction(W, 1, np.random.default_rng(3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solve_adjoint_lsmc(spec, alpha, simulate_forward(spec, alpha, W), W)
    assert np.max(np.abs(sol.Y)) <= 10 * bound


def test_adjoint_stability_single_constant():
    spec = example_lq_modified()
    W = _ensemble(10_000, seed=4)
    rng = np.random.default_rng(12)
    num, den = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(5):
            a = random_direction(W, 1, rng)
            b = random_direction(W, 1, rng)
            ya = solve_adjoint_lsmc(spec, a, simulate_forward(spec, a, W), W).Y
            yb = solve_adjoint_lsmc(spec, b, simulate_forward(spec, b, W), W).Y
            num.append(np.sqrt(np.mean((ya - yb) ** 2)))
            den.append(np.sqrt(control_norm_sq(a.like(a.values - b.values))))
    c, ok = holdout_constant(num, den, n_fit=3)
    assert ok
