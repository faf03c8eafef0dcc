import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msaflow.core import (
    ControlField,
    EnsembleShape,
    InvalidArgumentError,
    coarsen_brownian,
    control_distance,
    control_inner,
    control_norm_sq,
    make_time_grid,
    sample_brownian,
    standard_error,
)


def test_grid_four_steps():
    g = make_time_grid(1.0, 4)
    np.testing.assert_array_equal(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.dt == 0.25


def test_grid_single_step():
    g = make_time_grid(2.0, 1)
    np.testing.assert_array_equal(g.nodes, [0, 2.0])
    assert g.dt == 2.0


@pytest.mark.parametrize("T, n", [(1.0, 0), (0.0, 3), (-1.0, 3), (1.0, 2.5), (float("nan"), 2)])
def test_grid_rejects(T, n):
    with pytest.raises(InvalidArgumentError):
        make_time_grid(T, n)


def test_last_node_is_horizon():
    g = make_time_grid(0.3, 7)
    assert g.nodes[-1] == 0.3 and g.time(7) == 0.3


def test_brownian_determinism_and_seed_sensitivity():
    g = make_time_grid(1.0, 10)
    s = EnsembleShape(50, d_w=2)
    a = sample_brownian(1, s, g).increments
    assert np.array_equal(a, sample_brownian(1, s, g).increments)
    assert not np.array_equal(a, sample_brownian(2, s, g).increments)


def test_brownian_prefix_stable():
    g = make_time_grid(1.0, 10)
    small = sample_brownian(5, EnsembleShape(20), g).increments
    big = sample_brownian(5, EnsembleShape(200), g).increments
    assert np.array_equal(small, big[:20])


def test_brownian_moments():
    g = make_time_grid(1.0, 100)
    n = 100_000
    inc = sample_brownian(3, EnsembleShape(n), g).increments[..., 0]
    mean = inc.mean(axis=0)
    var = inc.var(axis=0, ddof=1)
    assert np.all(np.abs(mean) <= 5 * np.sqrt(g.dt / n))
    # chi-square: var of the sample variance is 2 dt^2 / (n - 1)
    assert np.all(np.abs(var - g.dt) <= 5 * g.dt * np.sqrt(2 / (n - 1)))
    assert var.min() >= 0.0097 and var.max() <= 0.0103


def test_paths_start_at_zero_and_sum_increments():
    g = make_time_grid(1.0, 8)
    W = sample_brownian(0, EnsembleShape(4), g)
    P = W.paths()
    assert np.all(P[:, 0] == 0)
    np.testing.assert_allclose(P[:, -1], W.increments.sum(axis=1))


def test_coarsen_keeps_endpoint():
    g = make_time_grid(1.0, 8)
    W = sample_brownian(0, EnsembleShape(4), g)
    C = coarsen_brownian(W, 4)
    assert C.grid.n_steps == 2
    np.testing.assert_allclose(C.paths()[:, -1], W.paths()[:, -1])
    with pytest.raises(InvalidArgumentError):
        coarsen_brownian(W, 3)


def test_arrays_are_read_only():
    g = make_time_grid(1.0, 2)
    a = ControlField.constant(EnsembleShape(3), g, 1.0)
    with pytest.raises(ValueError):
        a.values[0, 0, 0] = 2.0


def _field(vals, T=1.0):
    n, N, p = vals.shape
    return ControlField(EnsembleShape(n, p=p), make_time_grid(T, N), vals)


def test_norm_zero_and_constant():
    assert control_norm_sq(_field(np.zeros((5, 4, 1)))) == 0.0
    c, T = 1.7, 2.5
    assert control_norm_sq(_field(np.full((5, 4, 1), c), T)) == pytest.approx(c * c * T, rel=1e-14)


def test_norm_matches_reversed_loop():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(30, 12, 2))
    a = _field(vals)
    total = 0.0
    for i in reversed(range(30)):
        for k in reversed(range(12)):
            for j in reversed(range(2)):
                total += vals[i, k, j] ** 2
    ref = total * a.grid.dt / 30
    assert control_norm_sq(a) == pytest.approx(ref, rel=1e-12)


def test_inner_examples():
    rng = np.random.default_rng(1)
    a = _field(rng.normal(size=(6, 5, 1)))
    zero = a.like(np.zeros(a.values.shape))
    assert control_inner(a, zero) == 0.0
    assert control_inner(a, a) == pytest.approx(control_norm_sq(a), rel=1e-14)
    u = np.zeros((6, 5, 1))
    v = np.zeros((6, 5, 1))
    u[:, :2] = 1.0
    v[:, 3:] = 1.0
    assert control_inner(_field(u), _field(v)) == 0.0


def test_inner_shape_mismatch():
    a = _field(np.ones((3, 4, 1)))
    b = _field(np.ones((3, 5, 1)))
    with pytest.raises(InvalidArgumentError):
        control_inner(a, b)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(float, (7, 5, 2), elements=finite), arrays(float, (7, 5, 2), elements=finite))
def test_cauchy_schwarz(u, v):
    a, b = _field(u), _field(v)
    assert control_inner(a, b) ** 2 <= control_norm_sq(a) * control_norm_sq(b) * (1 + 1e-12) + 1e-9


@settings(max_examples=60, deadline=None)
@given(arrays(float, (4, 3, 1), elements=finite), arrays(float, (4, 3, 1), elements=finite),
       st.floats(-10, 10, allow_nan=False))
def test_inner_bilinear_symmetric(u, v, c):
    a, b = _field(u), _field(v)
    assert control_inner(a, b) == pytest.approx(control_inner(b, a), rel=1e-12, abs=1e-9)
    assert control_inner(c * a, b) == pytest.approx(c * control_inner(a, b), rel=1e-9, abs=1e-6)


def test_distance_and_standard_error():
    a = _field(np.ones((2, 4, 1)))
    b = _field(np.zeros((2, 4, 1)))
    assert control_distance(a, b) == pytest.approx(1.0)
    assert standard_error(np.array([1.0])) == 0.0
    assert standard_error(np.array([0.0, 2.0])) == pytest.approx(1.0 / np.sqrt(2) * np.sqrt(2))


def test_field_shape_checked():
    with pytest.raises(InvalidArgumentError):
        ControlField(EnsembleShape(2), make_time_grid(1.0, 3), np.zeros((2, 4, 1)))
    with pytest.raises(InvalidArgumentError):
        EnsembleShape(0)
