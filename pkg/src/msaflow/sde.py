"""Euler-Maruyama forward simulation and Monte Carlo cost estimation."""

from __future__ import annotations

import numpy as np

from .core import (
    BrownianEnsemble,
    ControlField,
    EnsembleShape,
    InvalidArgumentError,
    NumericalBlowupError,
    StatePaths,
)
from .problem import ProblemSpec

BLOWUP_THRESHOLD = 1e8


def _check_inputs(spec: ProblemSpec, alpha: ControlField, W: BrownianEnsemble) -> None:
    if alpha.grid != W.grid or alpha.shape.n_paths != W.shape.n_paths:
        raise InvalidArgumentError(f"control on {alpha.grid} / {alpha.shape} but noise on {W.grid} / {W.shape}")
    if alpha.shape.p != spec.p or W.shape.d_w != spec.d_w:
        raise InvalidArgumentError("control or noise dimension does not match the problem")


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def simulate_forward(spec: ProblemSpec, alpha: ControlField, W: BrownianEnsemble) -> StatePaths:
    """Euler-Maruyama: ``X_{k+1} = X_k + b dt + sigma dW_k`` with coefficients frozen at ``t_k``."""
    _check_inputs(spec, alpha, W)
    grid = W.grid
    n = W.shape.n_paths
    dt = grid.dt
    X = np.empty((n, grid.n_steps + 1, spec.d))
    X[:, 0] = spec.x0
    a = alpha.values
    dW = W.increments
    for k in range(grid.n_steps):
        t = grid.time(k)
        xk = X[:, k]
        drift = spec.b(t, xk, a[:, k])
        vol = spec.sigma(t, xk, a[:, k])
        X[:, k + 1] = xk + drift * dt + np.einsum("...ij,...j->...i", vol, dW[:, k])
        bad = ~np.all(np.abs(X[:, k + 1]) <= BLOWUP_THRESHOLD, axis=-1)
        if bad.any():
            path = _first_bad(bad)
            raise NumericalBlowupError(
                f"state left |x| <= {BLOWUP_THRESHOLD:g} on path {path} at step {k + 1}", path=path, step=k + 1
            )
    return StatePaths(EnsembleShape(n, spec.d, spec.d_w, spec.p), grid, X)


def path_costs(spec: ProblemSpec, alpha: ControlField, X: StatePaths) -> np.ndarray:
    """Per-path realised cost ``sum_k f(t_k, X_k, a_k) dt + g(X_N)``."""
    grid = X.grid
    if alpha.grid != grid:
        raise InvalidArgumentError("control and state live on different grids")
    a = alpha.values
    Xv = X.values
    running = np.zeros(Xv.shape[0])
    for k in range(grid.n_steps):
        running += spec.f(grid.time(k), Xv[:, k], a[:, k])
    total = running * grid.dt + spec.g(Xv[:, -1])
    if not np.all(np.isfinite(total)):
        path = _first_bad(~np.isfinite(total))
        raise NumericalBlowupError(f"non-finite cost on path {path}", path=path)
    return total


def estimate_cost(spec: ProblemSpec, alpha: ControlField, X: StatePaths) -> float:
    """Monte Carlo estimate of ``J(alpha)`` from simulated paths."""
    return float(np.mean(path_costs(spec, alpha, X)))


def cost(spec: ProblemSpec, alpha: ControlField, W: BrownianEnsemble) -> float:
    """Simulate and estimate in one call."""
    return estimate_cost(spec, alpha, simulate_forward(spec, alpha, W))


def simulate_feedback(spec: ProblemSpec, gain, offset, W: BrownianEnsemble) -> tuple[ControlField, StatePaths]:
    """Run the linear feedback ``a = gain x + offset`` and return the realised control and state.

    The control is recorded at left endpoints, so replaying it open loop
    through :func:`simulate_forward` reproduces the state.
    """
    gain = np.asarray(gain, float).reshape(spec.p, spec.d)
    offset = np.asarray(offset, float).reshape(spec.p)
    grid = W.grid
    n = W.shape.n_paths
    shape = EnsembleShape(n, spec.d, spec.d_w, spec.p)
    X = np.empty((n, grid.n_steps + 1, spec.d))
    X[:, 0] = spec.x0
    a = np.empty((n, grid.n_steps, spec.p))
    for k in range(grid.n_steps):
        t = grid.time(k)
        a[:, k] = X[:, k] @ gain.T + offset
        vol = spec.sigma(t, X[:, k], a[:, k])
        X[:, k + 1] = X[:, k] + spec.b(t, X[:, k], a[:, k]) * grid.dt + np.einsum("...ij,...j->...i", vol,
                                                                                   W.increments[:, k])
    alpha = ControlField(shape, grid, a)
    return alpha, simulate_forward(spec, alpha, W)
