"""Control problems: coefficients, Hamiltonian, derivative checks, built-in examples.

Callbacks are vectorised over leading batch axes.  With ``x`` shaped
``(..., d)`` and ``a`` shaped ``(..., p)`` they return

=============  ======================
``b``          ``(..., d)``
``sigma``      ``(..., d, d_w)``
``f``          ``(...)``
``g(x)``       ``(...)``
``Dx_b``       ``(..., d, d)``        ``[i, j] = d b_i / d x_j``
``Da_b``       ``(..., d, p)``
``Dx_sigma``   ``(..., d, d_w, d)``
``Da_sigma``   ``(..., d, d_w, p)``
``Dx_f``       ``(..., d)``
``Da_f``       ``(..., p)``
``Dx_g``       ``(..., d)``
``Da2_b``      ``(..., d, p, p)``
``Da2_f``      ``(..., p, p)``
=============  ======================

There is no slot for the second control derivative of ``sigma``: the diffusion
is required to be affine in the control.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import InvalidArgumentError

Callback = Callable[..., np.ndarray]

_CALLBACKS = (
    "b", "sigma", "f", "g",
    "Dx_b", "Da_b", "Dx_sigma", "Da_sigma", "Dx_f", "Da_f", "Dx_g", "Da2_b", "Da2_f",
)


def _batch(x: np.ndarray, a: np.ndarray) -> tuple:
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1])


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One finite-horizon control problem.

    Callbacks left as ``None`` are replaced by identically-zero functions of
    the right shape, which keeps toy problems short to write down.

    ``hess_a_constant`` declares that the control Hessian of the Hamiltonian
    does not depend on ``a`` (and is then used by the one-shot proximal solve).
    ``nonsmooth(t, x, a, h)`` returns a mask of points lying within ``h`` of a
    switching surface of a piecewise coefficient; derivative checks skip them.
    """

    d: int
    d_w: int
    p: int
    x0: np.ndarray
    b: Optional[Callback] = None
    sigma: Optional[Callback] = None
    f: Optional[Callback] = None
    g: Optional[Callback] = None
    Dx_b: Optional[Callback] = None
    Da_b: Optional[Callback] = None
    Dx_sigma: Optional[Callback] = None
    Da_sigma: Optional[Callback] = None
    Dx_f: Optional[Callback] = None
    Da_f: Optional[Callback] = None
    Dx_g: Optional[Callback] = None
    Da2_b: Optional[Callback] = None
    Da2_f: Optional[Callback] = None
    lambda_hint: float = 0.0
    hess_a_constant: bool = False
    cost_bound_K: Optional[float] = None
    nonsmooth: Optional[Callback] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.d,):
            raise InvalidArgumentError(f"x0 has shape {x0.shape}, expected ({self.d},)")
        object.__setattr__(self, "x0", x0)
        d, dw, p = self.d, self.d_w, self.p
        zero_shapes = {
            "b": (d,), "sigma": (d, dw), "f": (), "Dx_b": (d, d), "Da_b": (d, p),
            "Dx_sigma": (d, dw, d), "Da_sigma": (d, dw, p), "Dx_f": (d,), "Da_f": (p,),
            "Da2_b": (d, p, p), "Da2_f": (p, p),
        }
        for name, tail in zero_shapes.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, _zero_txa(tail))
        if self.g is None:
            object.__setattr__(self, "g", lambda x: np.zeros(np.shape(x)[:-1]))
        if self.Dx_g is None:
            object.__setattr__(self, "Dx_g", lambda x: np.zeros(np.shape(x)))


def _zero_txa(tail):
    def zero(t, x, a):
        return np.zeros(_batch(x, a) + tail)
    return zero


@dataclass(frozen=True)
class HamiltonianEval:
    value: np.ndarray
    grad_x: np.ndarray
    grad_a: np.ndarray
    hess_a: np.ndarray


def _check_dims(spec: ProblemSpec, x, y, z, a) -> None:
    if (np.shape(x)[-1:] != (spec.d,) or np.shape(y)[-1:] != (spec.d,)
            or np.shape(z)[-2:] != (spec.d, spec.d_w) or np.shape(a)[-1:] != (spec.p,)):
        raise InvalidArgumentError(
            f"dimension mismatch: x{np.shape(x)} y{np.shape(y)} z{np.shape(z)} a{np.shape(a)} "
            f"for d={spec.d}, d_w={spec.d_w}, p={spec.p}"
        )


def hamiltonian_value(spec, t, x, y, z, a):
    b = spec.b(t, x, a)
    s = spec.sigma(t, x, a)
    return np.einsum("...i,...i->...", b, y) + np.einsum("...ij,...ij->...", s, z) + spec.f(t, x, a)


def grad_x_H(spec, t, x, y, z, a):
    return (np.einsum("...ij,...i->...j", spec.Dx_b(t, x, a), y)
            + np.einsum("...ijk,...ij->...k", spec.Dx_sigma(t, x, a), z)
            + spec.Dx_f(t, x, a))


def grad_a_H(spec, t, x, y, z, a):
    return (np.einsum("...ij,...i->...j", spec.Da_b(t, x, a), y)
            + np.einsum("...ijk,...ij->...k", spec.Da_sigma(t, x, a), z)
            + spec.Da_f(t, x, a))


def hess_a_H(spec, t, x, y, z, a):
    # the sigma contribution vanishes because sigma is affine in a
    return np.einsum("...ijk,...i->...jk", spec.Da2_b(t, x, a), y) + spec.Da2_f(t, x, a)


def hamiltonian(spec: ProblemSpec, t, x, y, z, a) -> HamiltonianEval:
    """Evaluate ``H = b.y + sigma:z + f`` and its x-gradient, a-gradient and a-Hessian."""
    x, y, z, a = (np.asarray(v, dtype=float) for v in (x, y, z, a))
    _check_dims(spec, x, y, z, a)
    hess = hess_a_H(spec, t, x, y, z, a)
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    return HamiltonianEval(
        value=hamiltonian_value(spec, t, x, y, z, a),
        grad_x=grad_x_H(spec, t, x, y, z, a),
        grad_a=grad_a_H(spec, t, x, y, z, a),
        hess_a=hess,
    )


# ---------------------------------------------------------------------------
# derivative checks


def _central_diff(fun, v, h):
    """Jacobian of ``fun`` w.r.t. the last axis of ``v``; derivative axis appended last."""
    cols = []
    for j in range(v.shape[-1]):
        e = np.zeros(v.shape[-1])
        e[j] = h
        cols.append((fun(v + e) - fun(v - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(approx, exact):
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    scale = np.maximum(np.abs(exact), 1.0)
    return float(np.max(np.abs(approx - exact) / scale))


def _draw_points(spec, n_points, rng, horizon, box, h):
    t = rng.uniform(0.0, horizon, n_points)
    x = rng.uniform(-box, box, (n_points, spec.d))
    a = rng.uniform(-box, box, (n_points, spec.p))
    if spec.nonsmooth is not None:
        for _ in range(100):
            bad = np.array([bool(np.any(spec.nonsmooth(t[i], x[i], a[i], 10 * h))) for i in range(n_points)])
            if not bad.any():
                break
            m = int(bad.sum())
            x[bad] = rng.uniform(-box, box, (m, spec.d))
            a[bad] = rng.uniform(-box, box, (m, spec.p))
    return t, x, a


def check_derivatives(spec: ProblemSpec, n_points: int, seed: int, *, horizon: float = 1.0,
                      box: float = 2.0, h: float = 1e-5, K: float | None = None) -> dict:
    """Compare every derivative callback with central differences.

    Points are drawn uniformly with ``t`` in ``[0, horizon]`` and ``x``, ``a``
    in ``[-box, box]``, avoiding switching surfaces declared by ``spec.nonsmooth``.
    Errors are ``|fd - exact| / max(|exact|, 1)``, maximised over points and
    entries.  When a bound constant ``K`` is given (or ``spec.cost_bound_K`` is
    set) the report also carries ``lower_bound_violation``, the largest value of
    ``-K + |a|^2 / K - f`` found (``0`` when the bound holds everywhere).
    """
    if int(n_points) != n_points or n_points < 1:
        raise InvalidArgumentError(f"n_points must be >= 1, got {n_points!r}")
    rng = np.random.default_rng(seed)
    ts, xs, as_ = _draw_points(spec, int(n_points), rng, horizon, box, h)
    errs = {name: 0.0 for name in ("Dx_b", "Da_b", "Dx_sigma", "Da_sigma", "Dx_f", "Da_f",
                                    "Dx_g", "Da2_b", "Da2_f")}
    for t, x, a in zip(ts, xs, as_):
        pairs = {
            "Dx_b": (_central_diff(lambda v: spec.b(t, v, a), x, h), spec.Dx_b(t, x, a)),
            "Da_b": (_central_diff(lambda v: spec.b(t, x, v), a, h), spec.Da_b(t, x, a)),
            "Dx_sigma": (_central_diff(lambda v: spec.sigma(t, v, a), x, h), spec.Dx_sigma(t, x, a)),
            "Da_sigma": (_central_diff(lambda v: spec.sigma(t, x, v), a, h), spec.Da_sigma(t, x, a)),
            "Dx_f": (_central_diff(lambda v: spec.f(t, v, a), x, h), spec.Dx_f(t, x, a)),
            "Da_f": (_central_diff(lambda v: spec.f(t, x, v), a, h), spec.Da_f(t, x, a)),
            "Dx_g": (_central_diff(spec.g, x, h), spec.Dx_g(x)),
            "Da2_b": (_central_diff(lambda v: spec.Da_b(t, x, v), a, h), spec.Da2_b(t, x, a)),
            "Da2_f": (_central_diff(lambda v: spec.Da_f(t, x, v), a, h), spec.Da2_f(t, x, a)),
        }
        for name, (fd, exact) in pairs.items():
            errs[name] = max(errs[name], _rel_err(fd, exact))
    K = spec.cost_bound_K if K is None else K
    if K is not None:
        f_vals = np.array([spec.f(t, x, a) for t, x, a in zip(ts, xs, as_)])
        gap = -K + np.sum(as_ ** 2, axis=-1) / K - f_vals
        errs["lower_bound_violation"] = float(max(0.0, np.max(gap)))
    return errs


# ---------------------------------------------------------------------------
# built-in problems


def _as_matrix(value, shape):
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return arr
    if arr.size == 1 and int(np.prod(shape)) == 1:
        return arr.reshape(shape)
    if arr.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
        return float(arr) * np.eye(shape[0])
    raise InvalidArgumentError(f"parameter of shape {arr.shape} cannot be used as {shape}")


def _piecewise_state_cost(weight):
    """``weight/2 |x|^2`` on the unit ball, ``weight/2 |x|`` outside; gradient uses the inside branch on ``|x| = 1``."""

    def value(x):
        r = np.linalg.norm(x, axis=-1)
        return np.where(r <= 1.0, 0.5 * weight * r ** 2, 0.5 * weight * r)

    def grad(x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.where(r > 1.0, r, 1.0)
        return np.where(r <= 1.0, weight * x, 0.5 * weight * x / safe)

    return value, grad


def _near_unit_sphere(x, h):
    return np.abs(np.linalg.norm(x, axis=-1) - 1.0) < h


LQ_DEFAULTS = dict(A=0.2, B=1.0, beta=0.0, C=0.1, D=0.1, gamma=0.2, L=1.0, M=1.0, N=1.0, x0=0.5)


def _linear_dynamics(d, d_w, p, params):
    A = _as_matrix(params["A"], (d, d))
    B = _as_matrix(params["B"], (d, p))
    beta = _as_matrix(params["beta"], (d,))
    C = _as_matrix(params["C"], (d, d_w, d))
    D = _as_matrix(params["D"], (d, d_w, p))
    gamma = _as_matrix(params["gamma"], (d, d_w))

    def b(t, x, a):
        return np.einsum("ij,...j->...i", A, x) + np.einsum("ij,...j->...i", B, a) + beta

    def sigma(t, x, a):
        return np.einsum("ijk,...k->...ij", C, x) + np.einsum("ijk,...k->...ij", D, a) + gamma

    def const(arr):
        return lambda t, x, a: np.broadcast_to(arr, _batch(x, a) + arr.shape)

    return dict(b=b, sigma=sigma, Dx_b=const(A), Da_b=const(B), Dx_sigma=const(C),
                Da_sigma=const(D), Da2_b=const(np.zeros((d, p, p)))), (A, B, beta, C, D, gamma)


def example_lq_modified(params: dict | None = None, *, d: int = 1, d_w: int = 1, p: int = 1) -> ProblemSpec:
    """Linear dynamics with quadratic costs on the unit ball and linear growth outside.

    ``b = A x + B a + beta``, ``sigma = C x + D a + gamma``,
    ``f = L/2 |x|^2 + 1/2 a.M a`` for ``|x| <= 1`` (``L/2 |x|`` beyond) and
    ``g = N/2 |x|^2`` (``N/2 |x|`` beyond).  Missing keys take ``LQ_DEFAULTS``.
    Tensor parameters: ``C`` is ``(d, d_w, d)`` and ``D`` is ``(d, d_w, p)``.
    """
    prm = dict(LQ_DEFAULTS)
    prm.update(params or {})
    unknown = set(prm) - set(LQ_DEFAULTS)
    if unknown:
        raise InvalidArgumentError(f"unknown lq_modified parameters: {sorted(unknown)}")
    M = _as_matrix(prm["M"], (p, p))
    if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
        raise InvalidArgumentError("M must be symmetric positive definite")
    L, N = float(prm["L"]), float(prm["N"])
    if L < 0 or N < 0:
        raise InvalidArgumentError("L and N must be non-negative")
    dyn, _ = _linear_dynamics(d, d_w, p, prm)
    fx, gradfx = _piecewise_state_cost(L)
    gval, gradg = _piecewise_state_cost(N)

    def f(t, x, a):
        return fx(x) + 0.5 * np.einsum("...i,ij,...j->...", a, M, a)

    def Da_f(t, x, a):
        return np.broadcast_to(np.einsum("ij,...j->...i", M, a), _batch(x, a) + (p,))

    return ProblemSpec(
        d=d, d_w=d_w, p=p, x0=np.broadcast_to(np.asarray(prm["x0"], float), (d,)),
        f=f, g=gval, Dx_f=lambda t, x, a: np.broadcast_to(gradfx(x), _batch(x, a) + (d,)),
        Da_f=Da_f, Dx_g=gradg,
        Da2_f=lambda t, x, a: np.broadcast_to(M, _batch(x, a) + (p, p)),
        lambda_hint=0.0, hess_a_constant=True,
        cost_bound_K=float(max(np.linalg.eigvalsh(M).max(), 2.0 / np.linalg.eigvalsh(M).min())),
        nonsmooth=lambda t, x, a, h: _near_unit_sphere(x, h),
        name="lq_modified", params=_jsonable(prm), **dyn,
    )


def _quartic(M):
    def value(a):
        a2 = a * a
        outer = np.square(np.abs(a) - 1.0)
        return np.where(a2 > 1.0, outer, 0.5 * M * (a2 * a2 - a2))

    def grad(a):
        inner = M * a * (2 * a * a - 1.0)
        return np.where(np.abs(a) > 1.0, 2 * (a - np.sign(a)), inner)

    def hess(a):
        return np.where(np.abs(a) > 1.0, 2.0, M * (6 * a * a - 1.0))

    return value, grad, hess


QUARTIC_DEFAULTS = dict(LQ_DEFAULTS, lambda_hint=2.01)


def example_quartic(params: dict | None = None) -> ProblemSpec:
    """One-dimensional variant of ``example_lq_modified`` with a double-well control cost.

    The control part of ``f`` is ``M/2 (a^4 - a^2)`` on ``|a| <= 1`` and
    ``(a - 1)^2`` / ``(a + 1)^2`` beyond.  At ``|a| = 1`` the derivative
    callbacks return the inner branch.
    """
    prm = dict(QUARTIC_DEFAULTS)
    prm.update(params or {})
    unknown = set(prm) - set(QUARTIC_DEFAULTS)
    if unknown:
        raise InvalidArgumentError(f"unknown quartic parameters: {sorted(unknown)}")
    M = float(prm["M"])
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    L, N = float(prm["L"]), float(prm["N"])
    dyn, _ = _linear_dynamics(1, 1, 1, prm)
    fx, gradfx = _piecewise_state_cost(L)
    gval, gradg = _piecewise_state_cost(N)
    qv, qg, qh = _quartic(M)

    def nonsmooth(t, x, a, h):
        return _near_unit_sphere(x, h) | (np.abs(np.abs(a[..., 0]) - 1.0) < h)

    return ProblemSpec(
        d=1, d_w=1, p=1, x0=[float(prm["x0"])],
        f=lambda t, x, a: fx(x) + qv(a[..., 0]),
        g=gval,
        Dx_f=lambda t, x, a: np.broadcast_to(gradfx(x), _batch(x, a) + (1,)),
        Da_f=lambda t, x, a: np.broadcast_to(qg(a), _batch(x, a) + (1,)),
        Dx_g=gradg,
        Da2_f=lambda t, x, a: np.broadcast_to(qh(a)[..., None], _batch(x, a) + (1, 1)),
        lambda_hint=float(prm["lambda_hint"]), hess_a_constant=False,
        cost_bound_K=max(4.0, 2.0 / min(1.0, M) + M),
        nonsmooth=nonsmooth, name="quartic", params=_jsonable(prm), **dyn,
    )


def logistic(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


LOGISTIC_DEFAULTS = dict(A=1.0, sigma_x=0.1, sigma_a=0.1, sigma_c=0.2, L=1.0, M=1.0, N=1.0, x0=0.5,
                         y_box=5.0)


def logistic_lambda(A: float, M: float, y_box: float, box: float = 6.0, n: int = 241) -> float:
    """Smallest ``lambda >= 0`` making ``a -> H + lambda/2 a^2`` convex on a compact box.

    Grid minimisation of the control Hessian ``A L(x) L''(a) y + M`` over
    ``|x|, |a| <= box`` and ``|y| <= y_box``.
    """
    x = np.linspace(-box, box, n)
    a = np.linspace(-box, box, n)
    y = np.array([-y_box, y_box])  # the Hessian is affine in y
    la = logistic(a)
    d2 = la * (1 - la) * (1 - 2 * la)
    hess = A * logistic(x)[:, None, None] * d2[None, :, None] * y[None, None, :] + M
    return float(max(0.0, -hess.min()))


def example_logistic(params: dict | None = None) -> ProblemSpec:
    """Logistic drift ``b = L(x) A L(a)``, affine diffusion, costs of ``example_lq_modified``.

    ``L`` is the logistic function and the diffusion is
    ``sigma_x x + sigma_a a + sigma_c``.  The recorded ``lambda_hint`` comes
    from :func:`logistic_lambda` over adjoint values ``|y| <= y_box``.
    """
    prm = dict(LOGISTIC_DEFAULTS)
    prm.update(params or {})
    unknown = set(prm) - set(LOGISTIC_DEFAULTS)
    if unknown:
        raise InvalidArgumentError(f"unknown logistic parameters: {sorted(unknown)}")
    A, M = float(prm["A"]), float(prm["M"])
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    sx, sa, sc = float(prm["sigma_x"]), float(prm["sigma_a"]), float(prm["sigma_c"])
    fx, gradfx = _piecewise_state_cost(float(prm["L"]))
    gval, gradg = _piecewise_state_cost(float(prm["N"]))

    def d1(v):
        lv = logistic(v)
        return lv * (1 - lv)

    def d2(v):
        lv = logistic(v)
        return lv * (1 - lv) * (1 - 2 * lv)

    def b(t, x, a):
        return (logistic(x) * A * logistic(a))

    def const(value, tail):
        return lambda t, x, a: np.full(_batch(x, a) + tail, value)

    return ProblemSpec(
        d=1, d_w=1, p=1, x0=[float(prm["x0"])],
        b=b,
        sigma=lambda t, x, a: (sx * x + sa * a + sc)[..., None],
        f=lambda t, x, a: fx(x) + 0.5 * M * a[..., 0] ** 2,
        g=gval,
        Dx_b=lambda t, x, a: (d1(x) * A * logistic(a))[..., None],
        Da_b=lambda t, x, a: (logistic(x) * A * d1(a))[..., None],
        Dx_sigma=const(sx, (1, 1, 1)),
        Da_sigma=const(sa, (1, 1, 1)),
        Dx_f=lambda t, x, a: np.broadcast_to(gradfx(x), _batch(x, a) + (1,)),
        Da_f=lambda t, x, a: np.broadcast_to(M * a, _batch(x, a) + (1,)),
        Dx_g=gradg,
        Da2_b=lambda t, x, a: (logistic(x) * A * d2(a))[..., None, None],
        Da2_f=const(M, (1, 1)),
        lambda_hint=logistic_lambda(A, M, float(prm["y_box"])),
        hess_a_constant=False,
        cost_bound_K=max(M, 2.0 / M),
        nonsmooth=lambda t, x, a, h: _near_unit_sphere(x, h),
        name="logistic", params=_jsonable(prm),
    )


def example_quadratic_toy(params: dict | None = None) -> ProblemSpec:
    """Decoupled toy: ``f = |a|^2``, ``g = 0``, ``b = 0``, ``sigma = vol``.

    Here ``D_a H = 2a`` exactly, so the gradient flow is ``alpha_s = alpha_0 e^{-2s}``
    and ``J(alpha) = |alpha|^2`` in the discrete L2 norm.
    """
    prm = dict(vol=1.0, x0=0.0)
    prm.update(params or {})
    vol = float(prm["vol"])
    return ProblemSpec(
        d=1, d_w=1, p=1, x0=[float(prm["x0"])],
        sigma=lambda t, x, a: np.full(_batch(x, a) + (1, 1), vol),
        f=lambda t, x, a: np.sum(a ** 2, axis=-1) + np.zeros(_batch(x, a)),
        Da_f=lambda t, x, a: np.broadcast_to(2.0 * a, _batch(x, a) + (1,)),
        Da2_f=lambda t, x, a: np.broadcast_to(2.0 * np.eye(1), _batch(x, a) + (1, 1)),
        hess_a_constant=True, cost_bound_K=2.0, name="quadratic_toy", params=_jsonable(prm),
    )


EXAMPLES = {
    "lq_modified": example_lq_modified,
    "quartic": example_quartic,
    "logistic": example_logistic,
    "quadratic_toy": example_quadratic_toy,
}


def _jsonable(prm: dict) -> dict:
    out = {}
    for k, v in prm.items():
        arr = np.asarray(v)
        out[k] = arr.tolist() if arr.ndim else float(arr)
    return out
