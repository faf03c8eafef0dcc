"""Backward solvers for the adjoint equation ``dY = -D_x H dt + Z dW``, ``Y_T = D_x g(X_T)``.

``solve_adjoint_lsmc`` is the general least-squares Monte Carlo recursion.
``solve_adjoint_lq_analytic`` and ``solve_adjoint_deterministic`` are oracles
for the linear-quadratic and zero-noise sub-cases, and ``residual_check``
measures how well any candidate pair satisfies the discrete equation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb

import numpy as np

from .core import (
    AdjointSolution,
    BrownianEnsemble,
    ControlField,
    InvalidArgumentError,
    NumericalBlowupError,
    StatePaths,
)
from .problem import ProblemSpec, grad_x_H, LQ_DEFAULTS, _as_matrix

RIDGE = 1e-10


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features in ``(X_k, alpha_k)`` of total degree ``<= degree``."""

    kind: str = "polynomial"
    degree: int = 2
    include_control: bool = True
    max_features: int = 500

    def __post_init__(self):
        if self.kind != "polynomial":
            raise InvalidArgumentError(f"unsupported basis kind {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidArgumentError(f"degree must be a non-negative integer, got {self.degree!r}")
        if self.n_features(1, 1) > self.max_features:
            raise InvalidArgumentError("basis exceeds max_features")

    def n_features(self, d: int, p: int) -> int:
        n_vars = d + (p if self.include_control else 0)
        return comb(n_vars + self.degree, self.degree)


@dataclass(frozen=True)
class BsdeResidualReport:
    one_step_residual: float
    martingale_defect: float


def _standardise(v: np.ndarray) -> np.ndarray:
    mean = v.mean(axis=0)
    centred = v - mean
    std = np.sqrt(np.einsum("ij,ij->j", centred, centred) / v.shape[0])
    keep = std > 1e-12 * np.maximum(np.abs(mean), 1.0)
    return centred[:, keep] / std[keep]


def _monomial_plan(m: int, degree: int):
    """For each monomial beyond the intercept: (index of parent monomial, variable to multiply)."""
    plan = []
    prev = [((), 0)]
    count = 1
    for _ in range(degree):
        nxt = []
        for exps, col in prev:
            start = exps[-1] if exps else 0
            for j in range(start, m):
                plan.append((col, j))
                nxt.append((exps + (j,), count))
                count += 1
        prev = nxt
    return plan


def features(basis: RegressionBasis, x: np.ndarray, a: np.ndarray | None) -> np.ndarray:
    """Feature matrix ``(n_paths, n_features)``.

    Inputs are centred and scaled per column before taking monomials; columns
    that are constant across paths drop out (the intercept already spans them),
    so the returned width can be smaller than ``basis.n_features``.
    """
    cols = [x] if (a is None or not basis.include_control) else [x, a]
    v = _standardise(np.concatenate(cols, axis=-1))
    n, m = v.shape
    plan = _monomial_plan(m, basis.degree)
    out = np.empty((n, len(plan) + 1))
    out[:, 0] = 1.0
    for i, (parent, j) in enumerate(plan, start=1):
        np.multiply(out[:, parent], v[:, j], out=out[:, i])
    return out


class Projection:
    """Least-squares projection onto the span of a fixed feature matrix.

    Normal equations with a ridge of ``RIDGE * trace / m``; the Gram matrix is
    factorised once and reused for every target.
    """

    def __init__(self, phi: np.ndarray):
        self.phi = phi
        n, m = phi.shape
        gram = phi.T @ phi / n
        lam = RIDGE * np.trace(gram) / m
        eig = np.linalg.eigvalsh(gram)
        self.rank_deficient = bool(eig[0] <= 1e-12 * eig[-1])
        self._chol = np.linalg.cholesky(gram + lam * np.eye(m))

    def coefficients(self, target: np.ndarray) -> np.ndarray:
        rhs = self.phi.T @ target / self.phi.shape[0]
        w = np.linalg.solve(self._chol, rhs)
        return np.linalg.solve(self._chol.T, w)

    def __call__(self, target: np.ndarray) -> np.ndarray:
        """Fitted values of ``target`` (``(n,)`` or ``(n, q)``)."""
        return self.phi @ self.coefficients(target)


def _check_shapes(spec, alpha, X, W):
    if not (alpha.grid == X.grid == W.grid):
        raise InvalidArgumentError("control, state and noise must share the time grid")
    if not (alpha.values.shape[0] == X.values.shape[0] == W.increments.shape[0]):
        raise InvalidArgumentError("control, state and noise must share the path count")
    if X.values.shape[-1] != spec.d or W.increments.shape[-1] != spec.d_w:
        raise InvalidArgumentError("dimensions do not match the problem")


def solve_adjoint_lsmc(spec: ProblemSpec, alpha: ControlField, X: StatePaths, W: BrownianEnsemble,
                       basis: RegressionBasis | None = None, *, picard: bool = False) -> AdjointSolution:
    """Least-squares Monte Carlo backward recursion.

    For ``k = N-1, ..., 0``::

        Z_k    = CE[(Y_{k+1} - CE[Y_{k+1} | F_k]) dW_k^T | F_k] / dt
        Yhat_k = CE[Y_{k+1} - Z_k dW_k | F_k]
        Y_k    = Yhat_k + D_x H(t_k, X_k, Yhat_k, Z_k, alpha_k) dt

    with ``CE`` the projection on ``basis`` features of ``(X_k, alpha_k)``.
    Both subtracted terms have zero conditional mean given ``F_k``; they act as
    control variates for the two regressions.  ``picard=True`` adds one
    sweep with ``Y_k`` in place of ``Yhat_k`` inside the driver.
    """
    basis = basis or RegressionBasis()
    _check_shapes(spec, alpha, X, W)
    grid = X.grid
    n = X.values.shape[0]
    d, dw = spec.d, spec.d_w
    n_feat = basis.n_features(spec.d, spec.p)
    if n < 10 * n_feat:
        raise InvalidArgumentError(f"need at least {10 * n_feat} paths for {n_feat} features, got {n}")
    dt = grid.dt
    Xv, a, dW = X.values, alpha.values, W.increments
    Y = np.empty((n, grid.n_steps + 1, d))
    Z = np.empty((n, grid.n_steps, d, dw))
    Y_pred = np.empty((n, grid.n_steps, d))
    Y[:, -1] = spec.Dx_g(Xv[:, -1])
    deficient = False
    for k in range(grid.n_steps - 1, -1, -1):
        t = grid.time(k)
        proj = Projection(features(basis, Xv[:, k], a[:, k]))
        deficient |= proj.rank_deficient and proj.phi.shape[1] > 1
        y_next = Y[:, k + 1]
        resid = y_next - proj(y_next)
        zk = proj((resid[:, :, None] * dW[:, k, None, :]).reshape(n, d * dw)).reshape(n, d, dw) / dt
        y_hat = proj(y_next - np.einsum("nij,nj->ni", zk, dW[:, k]))
        yk = y_hat + grad_x_H(spec, t, Xv[:, k], y_hat, zk, a[:, k]) * dt
        if picard:
            yk = y_hat + grad_x_H(spec, t, Xv[:, k], yk, zk, a[:, k]) * dt
        if not (np.all(np.isfinite(yk)) and np.all(np.isfinite(zk))):
            raise NumericalBlowupError(f"non-finite adjoint at step {k}", step=k)
        Y[:, k], Z[:, k], Y_pred[:, k] = yk, zk, y_hat
    if deficient:
        warnings.warn("rank-deficient regression; solved with ridge-regularised least norm", RuntimeWarning,
                      stacklevel=2)
    return AdjointSolution(Y, Z, Y_pred, rank_deficient=deficient)


def _rk4_backward(rhs, terminal, t_end, n_sub):
    """Integrate ``u' = rhs(t, u)`` from ``t_end`` down to 0; returns values at the ``n_sub + 1`` nodes."""
    h = t_end / n_sub
    out = [terminal]
    u = terminal
    for i in range(n_sub, 0, -1):
        t = i * h
        k1 = rhs(t, u)
        k2 = rhs(t - h / 2, u - h / 2 * k1)
        k3 = rhs(t - h / 2, u - h / 2 * k2)
        k4 = rhs(t - h, u - h * k3)
        u = u - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(u)
    return out[::-1]


def lq_riccati(params: dict, feedback, horizon: float, n_steps: int, *, d: int = 1, d_w: int = 1, p: int = 1,
               refine: int = 10):
    """Backward linear ODEs for ``Y_t = P_t X_t + phi_t`` under ``alpha = K X + k``.

    ``P' = -(P (A + B K) + A^T P + sum_j C_j^T P (C_j + D_j K) + L I)``,
    ``phi' = -(P (B k + beta) + A^T phi + sum_j C_j^T P (D_j k + gamma_j))``,
    ``P_T = N I``, ``phi_T = 0``; classical RK4 with ``refine`` substeps per grid step.
    Returns ``(P, phi)`` sampled at the ``n_steps + 1`` grid nodes.
    """
    prm = dict(LQ_DEFAULTS)
    prm.update(params or {})
    A = _as_matrix(prm["A"], (d, d))
    B = _as_matrix(prm["B"], (d, p))
    beta = _as_matrix(prm["beta"], (d,))
    C = _as_matrix(prm["C"], (d, d_w, d))
    D = _as_matrix(prm["D"], (d, d_w, p))
    gamma = _as_matrix(prm["gamma"], (d, d_w))
    L, N = float(prm["L"]), float(prm["N"])
    K = _as_matrix(feedback[0], (p, d))
    kk = _as_matrix(feedback[1], (p,))
    A_cl = A + B @ K
    b_cl = B @ kk + beta
    Cj = [C[:, j, :] for j in range(d_w)]
    Cj_cl = [C[:, j, :] + D[:, j, :] @ K for j in range(d_w)]
    cj_cl = [D[:, j, :] @ kk + gamma[:, j] for j in range(d_w)]
    eye = np.eye(d)

    def rhs(t, u):
        P = u[: d * d].reshape(d, d)
        phi = u[d * d:]
        dP = P @ A_cl + A.T @ P + L * eye
        dphi = P @ b_cl + A.T @ phi
        for j in range(d_w):
            dP = dP + Cj[j].T @ P @ Cj_cl[j]
            dphi = dphi + Cj[j].T @ P @ cj_cl[j]
        return -np.concatenate([dP.ravel(), dphi])

    terminal = np.concatenate([(N * eye).ravel(), np.zeros(d)])
    fine = _rk4_backward(rhs, terminal, horizon, n_steps * refine)
    nodes = np.array(fine[::refine])
    return nodes[:, : d * d].reshape(-1, d, d), nodes[:, d * d:]


def solve_adjoint_lq_analytic(params: dict, feedback, X: StatePaths, *, refine: int = 10) -> AdjointSolution:
    """Pathwise adjoint for the quadratic branch of ``example_lq_modified``.

    ``feedback = (K, k)`` describes the control ``alpha = K X + k``.  Then
    ``Y_k = P(t_k) X_k + phi(t_k)`` and ``Z_k = P(t_k) sigma(t_k, X_k, alpha_k)``.
    Valid only while paths stay in ``|x| <= 1``; otherwise ``oracle_warning`` is set.
    """
    grid = X.grid
    d, d_w, p = X.shape.d, X.shape.d_w, X.shape.p
    prm = dict(LQ_DEFAULTS)
    prm.update(params or {})
    P, phi = lq_riccati(prm, feedback, grid.horizon_T, grid.n_steps, d=d, d_w=d_w, p=p, refine=refine)
    Xv = X.values
    K = _as_matrix(feedback[0], (p, d))
    kk = _as_matrix(feedback[1], (p,))
    A = _as_matrix(prm["A"], (d, d))
    B = _as_matrix(prm["B"], (d, p))
    beta = _as_matrix(prm["beta"], (d,))
    C = _as_matrix(prm["C"], (d, d_w, d))
    D = _as_matrix(prm["D"], (d, d_w, p))
    gamma = _as_matrix(prm["gamma"], (d, d_w))
    Y = np.einsum("kij,nkj->nki", P, Xv) + phi[None]
    a = np.einsum("ij,nkj->nki", K, Xv[:, :-1]) + kk
    sig = np.einsum("ijk,nlk->nlij", C, Xv[:, :-1]) + np.einsum("ijk,nlk->nlij", D, a) + gamma
    Z = np.einsum("kij,nkjl->nkil", P[:-1], sig)
    drift = np.einsum("ij,nkj->nki", A, Xv[:, :-1]) + np.einsum("ij,nkj->nki", B, a) + beta
    x_mean_next = Xv[:, :-1] + drift * grid.dt
    Y_pred = np.einsum("kij,nkj->nki", P[1:], x_mean_next) + phi[None, 1:]
    outside = bool(np.any(np.linalg.norm(Xv, axis=-1) > 1.0))
    if outside:
        warnings.warn("paths leave |x| <= 1; analytic LQ adjoint ignores the linear cost branch",
                      RuntimeWarning, stacklevel=2)
    return AdjointSolution(Y, Z, Y_pred, oracle_warning=outside)


def solve_adjoint_deterministic(spec: ProblemSpec, alpha: ControlField, X: StatePaths, *,
                                refine: int = 10) -> AdjointSolution:
    """Adjoint for zero-diffusion problems as a backward ODE, ``Z = 0``.

    Integrates ``Y' = -D_x H(t, xbar(t), Y, 0, abar(t))`` with RK4 on a grid
    ``refine`` times finer, where ``xbar`` and ``abar`` hold the left-node values
    of the simulated path on each interval.  Vectorised over paths.
    """
    grid = X.grid
    n = X.values.shape[0]
    d, dw = spec.d, spec.d_w
    Xv, a = X.values, alpha.values
    z0 = np.zeros((n, d, dw))
    dt = grid.dt
    h = dt / refine
    Y = np.empty((n, grid.n_steps + 1, d))
    Y[:, -1] = spec.Dx_g(Xv[:, -1])
    for k in range(grid.n_steps - 1, -1, -1):
        xk, ak = Xv[:, k], a[:, k]

        def rhs(t, u):
            return -grad_x_H(spec, t, xk, u, z0, ak)

        u = Y[:, k + 1]
        t_hi = grid.time(k + 1)
        for i in range(refine):
            t = t_hi - i * h
            k1 = rhs(t, u)
            k2 = rhs(t - h / 2, u - h / 2 * k1)
            k3 = rhs(t - h / 2, u - h / 2 * k2)
            k4 = rhs(t - h, u - h * k3)
            u = u - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        Y[:, k] = u
    return AdjointSolution(Y, np.zeros((n, grid.n_steps, d, dw)), Y[:, 1:].copy())


def residual_check(spec: ProblemSpec, alpha: ControlField, X: StatePaths, W: BrownianEnsemble,
                   sol: AdjointSolution, basis: RegressionBasis | None = None) -> BsdeResidualReport:
    """Conditional-mean defect of ``Y_k = Y_{k+1} + D_x H dt - Z_k dW_k``.

    The defect is regressed on the basis at each step; ``one_step_residual`` is
    the RMS of the fitted values over paths and steps, ``martingale_defect`` the
    RMS over steps of the raw path-mean defect.  The driver takes the same
    ``y`` argument as the control update (``sol.adjoint_at_step()``).
    """
    basis = basis or RegressionBasis()
    _check_shapes(spec, alpha, X, W)
    grid = X.grid
    Xv, a, dW = X.values, alpha.values, W.increments
    Y, Z = sol.Y, sol.Z
    y_drv = sol.adjoint_at_step()
    fitted_sq = 0.0
    means = []
    n = Xv.shape[0]
    for k in range(grid.n_steps):
        drv = grad_x_H(spec, grid.time(k), Xv[:, k], y_drv[:, k], Z[:, k], a[:, k])
        defect = Y[:, k + 1] - Y[:, k] + drv * grid.dt - np.einsum("nij,nj->ni", Z[:, k], dW[:, k])
        fit = Projection(features(basis, Xv[:, k], a[:, k]))(defect)
        fitted_sq += float(np.sum(fit ** 2))
        means.append(defect.mean(axis=0))
    one_step = np.sqrt(fitted_sq / (n * grid.n_steps))
    mart = float(np.sqrt(np.mean(np.square(means))))
    return BsdeResidualReport(float(one_step), mart)
