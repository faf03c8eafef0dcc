"""Time grids, Brownian ensembles, control fields and the discrete L2 geometry.

Every array in this module is laid out path-major: ``[path, step, component]``.
Monte Carlo expectations are plain means over the path axis and time integrals
use the left-endpoint rule, so ``E int_0^T |a_t|^2 dt`` becomes
``mean_paths(sum_k |a[:, k]|^2) * dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidArgumentError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalBlowupError(FloatingPointError):
    """Raised when a simulation leaves the finite range.

    Attributes
    ----------
    path, step : int
        First offending location (path index, time-step index).
    """

    def __init__(self, message: str, path: int | None = None, step: int | None = None):
        super().__init__(message)
        self.path = path
        self.step = step


class ConvergenceFailureError(ArithmeticError):
    """Raised when a pointwise Newton solve does not reach its tolerance."""

    def __init__(self, message: str, failures=()):
        super().__init__(message)
        self.failures = list(failures)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``0 = t_0 < ... < t_N = T``."""

    horizon_T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        # k * dt rather than linspace so that nodes[k] is exactly the t_k used in the loops
        nodes = np.arange(self.n_steps + 1) * self.dt
        nodes[-1] = self.horizon_T
        return nodes

    def time(self, k: int) -> float:
        return self.horizon_T if k == self.n_steps else k * self.dt


def make_time_grid(horizon_T: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid on ``[0, horizon_T]`` with ``n_steps`` intervals."""
    if not np.isfinite(horizon_T) or horizon_T <= 0:
        raise InvalidArgumentError(f"horizon_T must be positive, got {horizon_T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be a positive integer, got {n_steps!r}")
    return TimeGrid(float(horizon_T), int(n_steps))


@dataclass(frozen=True)
class EnsembleShape:
    n_paths: int
    d: int = 1
    d_w: int = 1
    p: int = 1

    def __post_init__(self):
        for name in ("n_paths", "d", "d_w", "p"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """Brownian increments ``dW[path, step, j]`` with variance ``dt``."""

    shape: EnsembleShape
    grid: TimeGrid
    seed: int
    increments: np.ndarray = field(repr=False)

    def __post_init__(self):
        inc = _frozen(self.increments)
        expected = (self.shape.n_paths, self.grid.n_steps, self.shape.d_w)
        if inc.shape != expected:
            raise InvalidArgumentError(f"increments have shape {inc.shape}, expected {expected}")
        object.__setattr__(self, "increments", inc)

    def paths(self) -> np.ndarray:
        """Brownian values ``W[path, k, j]`` at the grid nodes, ``W_0 = 0``."""
        n, _, dw = self.increments.shape
        out = np.zeros((n, self.grid.n_steps + 1, dw))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def with_increments(self, increments: np.ndarray) -> "BrownianEnsemble":
        return BrownianEnsemble(self.shape, self.grid, self.seed, increments)


def sample_brownian(seed: int, shape: EnsembleShape, grid: TimeGrid) -> BrownianEnsemble:
    """Draw Gaussian increments from a Philox counter-based stream keyed on ``seed``.

    Path ``i`` always occupies the same block of the stream, so enlarging
    ``n_paths`` keeps the first paths bit-identical.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    z = rng.standard_normal((shape.n_paths, grid.n_steps, shape.d_w))
    return BrownianEnsemble(shape, grid, int(seed), z * np.sqrt(grid.dt))


def coarsen_brownian(W: BrownianEnsemble, factor: int) -> BrownianEnsemble:
    """Sum consecutive blocks of ``factor`` increments (same paths, coarser grid)."""
    if factor < 1 or W.grid.n_steps % factor:
        raise InvalidArgumentError(f"factor {factor} does not divide n_steps={W.grid.n_steps}")
    n, m, dw = W.increments.shape
    inc = W.increments.reshape(n, m // factor, factor, dw).sum(axis=2)
    grid = make_time_grid(W.grid.horizon_T, m // factor)
    return BrownianEnsemble(W.shape, grid, W.seed, inc)


@dataclass(frozen=True, eq=False)
class ControlField:
    """Open-loop control values ``a[path, k, :]`` on ``[t_k, t_{k+1})``."""

    shape: EnsembleShape
    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = _frozen(self.values)
        expected = (self.shape.n_paths, self.grid.n_steps, self.shape.p)
        if vals.shape != expected:
            raise InvalidArgumentError(f"control values have shape {vals.shape}, expected {expected}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, shape: EnsembleShape, grid: TimeGrid, value=0.0) -> "ControlField":
        vals = np.broadcast_to(np.asarray(value, dtype=float), (shape.n_paths, grid.n_steps, shape.p))
        return cls(shape, grid, vals)

    def like(self, values: np.ndarray) -> "ControlField":
        return ControlField(self.shape, self.grid, values)

    def __add__(self, other: "ControlField") -> "ControlField":
        _check_compatible(self, other)
        return self.like(self.values + other.values)

    def __sub__(self, other: "ControlField") -> "ControlField":
        _check_compatible(self, other)
        return self.like(self.values - other.values)

    def __mul__(self, scalar: float) -> "ControlField":
        return self.like(self.values * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class StatePaths:
    shape: EnsembleShape
    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    """Discrete adjoint pair.

    ``Y[path, k, :]`` for ``k = 0..N`` and ``Z[path, k, :, :]`` for ``k = 0..N-1``.
    ``Y_pred[path, k]`` is the one-step conditional mean ``E[Y_{k+1} | F_k]``;
    control updates evaluate the Hamiltonian with it (see ``adjoint_at_step``).
    """

    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    Y_pred: np.ndarray | None = field(default=None, repr=False)
    rank_deficient: bool = False
    oracle_warning: bool = False

    def __post_init__(self):
        object.__setattr__(self, "Y", _frozen(self.Y))
        object.__setattr__(self, "Z", _frozen(self.Z))
        if self.Y_pred is not None:
            object.__setattr__(self, "Y_pred", _frozen(self.Y_pred))

    def adjoint_at_step(self) -> np.ndarray:
        """The ``y`` argument used for the Hamiltonian on ``[t_k, t_{k+1})``."""
        return self.Y_pred if self.Y_pred is not None else self.Y[:, :-1]


def _check_compatible(a: ControlField, b: ControlField) -> None:
    if a.values.shape != b.values.shape or a.grid != b.grid:
        raise InvalidArgumentError(
            f"control fields do not match: {a.values.shape} on {a.grid} vs {b.values.shape} on {b.grid}"
        )


def path_inner(a: np.ndarray, b: np.ndarray, dt: float) -> np.ndarray:
    """Per-path ``sum_k a_k . b_k dt`` for arrays shaped ``[path, step, ...]``."""
    n = a.shape[0]
    return np.einsum("ij,ij->i", a.reshape(n, -1), b.reshape(n, -1)) * dt


def control_inner(alpha: ControlField, beta: ControlField) -> float:
    """Discrete ``E int_0^T alpha_t . beta_t dt``."""
    _check_compatible(alpha, beta)
    return float(np.mean(path_inner(alpha.values, beta.values, alpha.grid.dt)))


def control_norm_sq(alpha: ControlField) -> float:
    """Discrete ``E int_0^T |alpha_t|^2 dt``."""
    return float(np.mean(path_inner(alpha.values, alpha.values, alpha.grid.dt)))


def control_distance(alpha: ControlField, beta: ControlField) -> float:
    return float(np.sqrt(control_norm_sq(alpha - beta)))


def standard_error(samples: np.ndarray) -> float:
    """Standard error of the sample mean of a 1-d array of per-path values."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / np.sqrt(samples.size))
