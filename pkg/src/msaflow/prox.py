"""Pointwise control updates.

The implicit (proximal) step solves ``argmin_a H(a) + |a - a_prev|^2 / (2 tau)``
through its first-order condition ``D_a H(a) + (a - a_prev) / tau = 0``; the
explicit step is ``a_prev - tau D_a H(a_prev)``.  Both act on whole batches of
points at once and are lifted to control fields by :func:`update_control`.
"""

from __future__ import annotations

import numpy as np

from .core import AdjointSolution, ConvergenceFailureError, ControlField, InvalidArgumentError, StatePaths
from .problem import ProblemSpec, grad_a_H, hamiltonian_value, hess_a_H

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50
MAX_HALVINGS = 20


def _solve(mat, rhs):
    if mat.shape[-1] == 1:
        return rhs / mat[..., 0]
    return np.linalg.solve(mat, rhs[..., None])[..., 0]


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


def check_tau(spec: ProblemSpec, tau: float) -> None:
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau!r}")
    if spec.lambda_hint > 0 and tau * spec.lambda_hint >= 1.0:
        raise InvalidArgumentError(
            f"tau={tau} violates tau < 1/lambda = {1.0 / spec.lambda_hint:.6g}; the proximal problem may be non-convex"
        )


def prox_solve(spec: ProblemSpec, t: float, x, y, z, a_prev, tau: float, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER, stats: dict | None = None):
    """Batched proximal step.

    Returns ``(a, residual, failed)`` where ``residual`` is the norm of
    ``D_a H(a) + (a - a_prev) / tau`` and ``failed`` flags points that did not
    reach ``tol``.  If ``stats`` is a dict it receives ``min_eig``, the smallest
    eigenvalue of ``hess_a + I / tau`` over all iterates visited.
    """
    a_prev = np.asarray(a_prev, dtype=float)
    p = a_prev.shape[-1]
    eye = np.eye(p) / tau

    def residual(a):
        return grad_a_H(spec, t, x, y, z, a) + (a - a_prev) / tau

    # (a - a_prev) / tau cannot be resolved below the rounding of a and a_prev
    floor = 8 * np.finfo(float).eps * (_norm(a_prev) + 1.0) / tau

    def record(jac):
        if stats is not None:
            eig = jac[..., 0, 0] if p == 1 else np.linalg.eigvalsh(jac)[..., 0]
            stats["min_eig"] = min(stats.get("min_eig", np.inf), float(np.min(eig)))

    if spec.hess_a_constant:
        jac = hess_a_H(spec, t, x, y, z, a_prev) + eye
        record(jac)
        a = a_prev - _solve(jac, grad_a_H(spec, t, x, y, z, a_prev))
        res = _norm(residual(a))
        return a, res, res > np.maximum(tol, floor)

    a = a_prev.copy()
    r = residual(a)
    rn = _norm(r)
    thresh = np.maximum(tol, floor)
    stuck = np.zeros(rn.shape, dtype=bool)
    for _ in range(max_iter):
        active = (rn > thresh) & ~stuck
        if not active.any():
            break
        jac = hess_a_H(spec, t, x, y, z, a) + eye
        record(jac)
        step = _solve(jac, r)
        scale = np.ones(rn.shape)
        trial = a - step
        r_trial = residual(trial)
        rn_trial = _norm(r_trial)
        for _ in range(MAX_HALVINGS):
            worse = active & ~(rn_trial < rn)
            if not worse.any():
                break
            scale = np.where(worse, scale * 0.5, scale)
            trial = a - scale[..., None] * step
            r_trial = residual(trial)
            rn_trial = _norm(r_trial)
        accept = active & (rn_trial < rn)
        a = np.where(accept[..., None], trial, a)
        r = np.where(accept[..., None], r_trial, r)
        rn = np.where(accept, rn_trial, rn)
        stuck |= active & ~accept
    failed = rn > thresh
    if p == 1 and failed.any():
        idx = np.flatnonzero(failed)
        xs, ys, zs, ap = (np.broadcast_to(v, a.shape[:-1] + v.shape[-k:])[idx]
                          for v, k in ((np.asarray(x), 1), (np.asarray(y), 1), (np.asarray(z), 2), (a_prev, 1)))

        def res_sub(b):
            return (grad_a_H(spec, t, xs, ys, zs, b[:, None]) + (b[:, None] - ap) / tau)[:, 0]

        th = thresh[idx] if np.ndim(thresh) else np.full(idx.size, thresh)
        b, res, ok = _bisect_scalar(res_sub, a[idx, 0], th, tau)
        a = a.copy()
        rn = rn.copy()
        a[idx, 0] = b
        rn[idx] = res
        failed = failed.copy()
        failed[idx] = ~ok
    return a, rn, failed


def _bisect_scalar(res, a0, thresh, tau):
    """Fallback for scalar controls where ``D_a H`` jumps.

    The proximal residual is increasing in ``a`` (strong convexity), so a sign
    change can be bracketed and bisected.  A bracket that collapses to rounding
    width around a jump is a subgradient root and counts as converged.
    """
    r0 = res(a0)
    sign = np.where(r0 > 0, -1.0, 1.0)
    width = tau * np.maximum(np.abs(r0), 1e-12)
    other = a0 + sign * width
    for _ in range(60):
        open_ = np.sign(res(other)) == np.sign(r0)
        if not open_.any():
            break
        width = np.where(open_, 2 * width, width)
        other = np.where(open_, a0 + sign * width, other)
    lo = np.minimum(a0, other)
    hi = np.maximum(a0, other)
    for _ in range(1100):
        mid = 0.5 * (lo + hi)
        if np.all((mid <= lo) | (mid >= hi)):
            break
        up = res(mid) > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    r_lo, r_hi = res(lo), res(hi)
    best = np.where(np.abs(r_lo) <= np.abs(r_hi), lo, hi)
    out = np.minimum(np.abs(r_lo), np.abs(r_hi))
    collapsed = hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi))
    ok = (out <= thresh) | ((r_lo <= thresh) & (r_hi >= -thresh) & collapsed)
    return best, out, ok


def prox_step_point(spec: ProblemSpec, t: float, x, y, z, a_prev, tau: float, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Proximal update at a single point by damped Newton (closed form when ``hess_a`` is constant)."""
    check_tau(spec, tau)
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    x = np.asarray(x, float).reshape(1, spec.d)
    y = np.asarray(y, float).reshape(1, spec.d)
    z = np.asarray(z, float).reshape(1, spec.d, spec.d_w)
    a0 = np.asarray(a_prev, float).reshape(1, spec.p)
    a, res, failed = prox_solve(spec, t, x, y, z, a0, tau, tol, max_iter)
    if failed[0]:
        raise ConvergenceFailureError(
            f"proximal Newton stalled at t={t}, x={x[0]}, residual={res[0]:.3e}", [(t, x[0].tolist(), float(res[0]))]
        )
    return a[0]


def explicit_step_point(spec: ProblemSpec, t: float, x, y, z, a_prev, tau: float) -> np.ndarray:
    """``a_prev - tau * D_a H(t, x, y, z, a_prev)``."""
    x = np.asarray(x, float).reshape(1, spec.d)
    y = np.asarray(y, float).reshape(1, spec.d)
    z = np.asarray(z, float).reshape(1, spec.d, spec.d_w)
    a0 = np.asarray(a_prev, float).reshape(1, spec.p)
    return (a0 - tau * grad_a_H(spec, t, x, y, z, a0))[0]


def gradient_field(spec: ProblemSpec, alpha: ControlField, X: StatePaths, sol: AdjointSolution) -> np.ndarray:
    """``D_a H(t_k, X_k, Y_k, Z_k, alpha_k)`` at every ``(path, step)``."""
    grid = alpha.grid
    y = sol.adjoint_at_step()
    out = np.empty(alpha.values.shape)
    for k in range(grid.n_steps):
        out[:, k] = grad_a_H(spec, grid.time(k), X.values[:, k], y[:, k], sol.Z[:, k], alpha.values[:, k])
    return out


def hamiltonian_field(spec: ProblemSpec, alpha: ControlField, X: StatePaths, sol: AdjointSolution,
                      controls: np.ndarray | None = None) -> np.ndarray:
    """``H(t_k, X_k, Y_k, Z_k, a)`` with ``a`` taken from ``controls`` (default ``alpha``)."""
    grid = alpha.grid
    a = alpha.values if controls is None else controls
    y = sol.adjoint_at_step()
    out = np.empty(a.shape[:2])
    for k in range(grid.n_steps):
        out[:, k] = hamiltonian_value(spec, grid.time(k), X.values[:, k], y[:, k], sol.Z[:, k], a[:, k])
    return out


def update_control(spec: ProblemSpec, alpha_prev: ControlField, X: StatePaths, sol: AdjointSolution, tau: float,
                   mode: str = "implicit", tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                   stats: dict | None = None) -> ControlField:
    """Apply the pointwise step at every ``(path, step)`` using only step-``k`` data."""
    if mode not in ("implicit", "explicit"):
        raise InvalidArgumentError(f"mode must be 'implicit' or 'explicit', got {mode!r}")
    if mode == "explicit":
        if not tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {tau!r}")
        return alpha_prev.like(alpha_prev.values - tau * gradient_field(spec, alpha_prev, X, sol))
    check_tau(spec, tau)
    grid = alpha_prev.grid
    y = sol.adjoint_at_step()
    new = np.empty(alpha_prev.values.shape)
    failures = []
    for k in range(grid.n_steps):
        t = grid.time(k)
        a, res, failed = prox_solve(spec, t, X.values[:, k], y[:, k], sol.Z[:, k], alpha_prev.values[:, k], tau,
                                    tol, max_iter, stats)
        new[:, k] = a
        if failed.any() and len(failures) < 10:
            for path in np.flatnonzero(failed)[: 10 - len(failures)]:
                failures.append((int(path), k, float(res[path])))
    if failures:
        where = ", ".join(f"(path {p}, step {k}, residual {r:.2e})" for p, k, r in failures)
        raise ConvergenceFailureError(f"proximal Newton failed at {where}", failures)
    return alpha_prev.like(new)
