import numpy as np
import pytest
from conftest import holdout_constant

from msaflow.analysis import fit_rate, random_direction
from msaflow.core import (
    ControlField,
    EnsembleShape,
    InvalidArgumentError,
    control_distance,
    control_norm_sq,
    make_time_grid,
    sample_brownian,
)
from msaflow.flow import (
    energy_identity_check,
    flow_steps,
    gap_bound_check,
    integral_identity,
    interpolate_controls,
    run_gradient_flow,
)
from msaflow.msa import evaluate
from msaflow.problem import example_lq_modified, example_quadratic_toy, example_quartic

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def _noise(n_paths, seed=5, n_steps=50):
    return sample_brownian(seed, EnsembleShape(n_paths), make_time_grid(1.0, n_steps))


def _const(W, value):
    return ControlField.constant(EnsembleShape(W.shape.n_paths), W.grid, value)


@pytest.fixture(scope="module")
def toy_fine():
    W = _noise(100, n_steps=10)
    return run_gradient_flow(example_quadratic_toy(), _const(W, 1.0), W, 1.0, 1e-3, "explicit")


def test_toy_flow_tracks_exponential(toy_fine):
    final = toy_fine.final_control.values
    assert np.max(np.abs(final / np.exp(-2.0) - 1)) <= 3e-3
    np.testing.assert_allclose(final, 0.998 ** 1000, rtol=1e-12)


def test_single_explicit_step():
    W = _noise(100, n_steps=10)
    spec = example_lq_modified()
    alpha0 = random_direction(W, 1, np.random.default_rng(0))
    traj = run_gradient_flow(spec, alpha0, W, 0.4, 0.4, "explicit")
    st = evaluate(spec, alpha0, W)
    assert traj.n_steps == 1
    np.testing.assert_array_equal(traj.final_control.values, alpha0.values - 0.4 * st.grad)


def test_step_count_rounds_up():
    assert flow_steps(1.0, 0.3) == (4, 0.25)
    assert flow_steps(1.0, 0.1) == (10, 0.1)
    with pytest.raises(InvalidArgumentError):
        flow_steps(1.0, 0.0)


def test_schemes_converge_together():
    W = _noise(1000)
    spec = example_lq_modified()
    a0 = _const(W, 0.0)
    taus = [0.1, 0.05, 0.025]
    gaps = []
    for tau in taus:
        e = run_gradient_flow(spec, a0, W, 1.0, tau, "explicit")
        i = run_gradient_flow(spec, a0, W, 1.0, tau, "implicit")
        gaps.append(control_distance(e.final_control, i.final_control))
    assert 0.9 <= fit_rate(list(zip(taus, gaps))).slope <= 1.1


@pytest.mark.slow
def test_schemes_agree_at_small_step():
    W = _noise(1000)
    spec = example_lq_modified()
    a0 = _const(W, 0.0)
    e = run_gradient_flow(spec, a0, W, 1.0, 1e-3, "explicit")
    i = run_gradient_flow(spec, a0, W, 1.0, 1e-3, "implicit")
    assert control_distance(e.final_control, i.final_control) <= 5e-3


@pytest.fixture(scope="module")
def short_traj():
    W = _noise(300, n_steps=20)
    return run_gradient_flow(example_lq_modified(), random_direction(W, 1, np.random.default_rng(4)), W, 1.0, 0.1,
                             "implicit", store_every=1)


def test_interpolant_examples(short_traj):
    tr = short_traj
    for mode in ("hat", "plus", "minus"):
        assert interpolate_controls(tr, 0.0, mode) is tr.control_at_node(0)
        assert np.array_equal(interpolate_controls(tr, 0.5, mode).values, tr.control_at_node(5).values)
    mid = interpolate_controls(tr, 0.35, "hat").values
    np.testing.assert_allclose(mid, 0.5 * (tr.control_at_node(3).values + tr.control_at_node(4).values), atol=1e-15)
    for s in (0.31, 0.35, 0.399):
        assert interpolate_controls(tr, s, "plus") is tr.control_at_node(4)
        assert interpolate_controls(tr, s, "minus") is tr.control_at_node(3)


def test_interpolant_range_and_mode(short_traj):
    with pytest.raises(InvalidArgumentError):
        interpolate_controls(short_traj, -0.01)
    with pytest.raises(InvalidArgumentError):
        interpolate_controls(short_traj, 1.2)
    with pytest.raises(InvalidArgumentError):
        interpolate_controls(short_traj, 0.5, "middle")


def test_interpolant_consistency(short_traj):
    for s in np.linspace(0.0, 1.0, 37):
        hat = interpolate_controls(short_traj, s, "hat")
        plus = interpolate_controls(short_traj, s, "plus")
        minus = interpolate_controls(short_traj, s, "minus")
        assert control_distance(hat, minus) <= control_distance(plus, minus) + 1e-15


def test_thinned_storage():
    W = _noise(200, n_steps=10)
    tr = run_gradient_flow(example_quadratic_toy(), _const(W, 1.0), W, 1.0, 0.01, "explicit")
    assert tr.stored_nodes == list(range(0, 101, 1))
    tr = run_gradient_flow(example_quadratic_toy(), _const(W, 1.0), W, 3.0, 0.01, "explicit")
    assert tr.stored_nodes == list(range(0, 301, 3))
    assert len(tr.J_trace) == 301
    with pytest.raises(InvalidArgumentError):
        tr.control_at_node(1)


def test_observer_sees_every_node():
    W = _noise(200, n_steps=10)
    seen = []
    run_gradient_flow(example_quadratic_toy(), _const(W, 1.0), W, 0.5, 0.1, "explicit", store_every=5,
                      observer=lambda n, s, a: seen.append((n, round(s, 12))))
    assert seen == [(n, round(0.1 * n, 12)) for n in range(6)]


def test_refinement_is_first_order():
    W = _noise(2000)
    spec = example_lq_modified()
    a0 = _const(W, 0.0)
    finals = {tau: run_gradient_flow(spec, a0, W, 1.0, tau, "implicit").final_control
              for tau in (0.1, 0.05, 0.025, 0.0125)}
    taus = [0.1, 0.05, 0.025]
    d = [control_distance(finals[t], finals[t / 2]) for t in taus]
    c, ok = holdout_constant(d, taus, n_fit=2)
    assert ok
    assert 0.7 <= fit_rate(list(zip(taus, d))).slope <= 1.3


def test_implicit_with_backtracking_is_monotone():
    W = _noise(1000, seed=2)
    tr = run_gradient_flow(example_quartic(), _const(W, 0.9), W, 2.0, 0.2, "implicit", backtrack=True)
    assert np.all(np.diff(tr.J_trace) <= 0)


def test_explicit_flow_monotone_within_noise():
    W = _noise(1000, seed=2)
    tr = run_gradient_flow(example_lq_modified(), _const(W, 0.0), W, 1.0, 0.05, "explicit")
    assert np.all(np.diff(tr.J_trace) <= 3 * tr.J_se_trace[1:])


def test_backtracking_requires_implicit():
    W = _noise(100, n_steps=5)
    with pytest.raises(InvalidArgumentError):
        run_gradient_flow(example_lq_modified(), _const(W, 0.0), W, 1.0, 0.1, "explicit", backtrack=True)
    with pytest.raises(InvalidArgumentError):
        run_gradient_flow(example_quartic(), _const(W, 0.0), W, 1.0, 0.5, "implicit")


def test_energy_identity_on_toy(toy_fine):
    rep = energy_identity_check(toy_fine)
    assert rep.n_eligible == toy_fine.n_steps - 1
    assert rep.max_rel_err <= 0.02


def test_energy_identity_stationary():
    W = _noise(100, n_steps=10)
    tr = run_gradient_flow(example_quadratic_toy(), _const(W, 0.0), W, 0.3, 0.1, "explicit")
    rep = energy_identity_check(tr)
    assert rep.n_eligible == 0 and rep.note == "no eligible nodes"
    assert np.all(tr.J_trace == 0) and np.all(tr.grad_norm_sq_trace == 0)


def test_energy_identity_needs_three_nodes():
    W = _noise(100, n_steps=10)
    tr = run_gradient_flow(example_quadratic_toy(), _const(W, 1.0), W, 0.1, 0.1, "explicit")
    with pytest.raises(InvalidArgumentError):
        energy_identity_check(tr)


def test_integral_identity_on_toy(toy_fine):
    # J(alpha_s) = e^{-4s}, so the drop is 1 - e^{-4} and the integral of 4 e^{-4s} agrees
    ident = integral_identity(toy_fine)
    assert ident["cost_drop"] == pytest.approx(1 - np.exp(-4), rel=5e-3)
    assert ident["rel_err"] <= 1e-2


def test_gap_bound_identical_controls():
    W = _noise(500)
    a = random_direction(W, 1, np.random.default_rng(3))
    rep = gap_bound_check(example_lq_modified(), W, None, a, a)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.satisfied


def test_gap_bound_convex_examples():
    W = _noise(2000)
    spec = example_lq_modified()
    rng = np.random.default_rng(6)
    theta = _const(W, 0.0)
    for _ in range(3):
        beta = random_direction(W, 1, rng)
        beta = beta.like(0.3 * beta.values)
        assert gap_bound_check(spec, W, None, beta, theta).satisfied


def test_gap_bound_can_fail_without_convexity():
    W = _noise(1000)
    rep = gap_bound_check(example_quartic(), W, None, _const(W, 0.0), _const(W, 0.9))
    assert not rep.satisfied
    assert rep.lhs > rep.rhs + 3 * rep.se
