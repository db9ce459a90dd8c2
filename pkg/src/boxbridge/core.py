"""Domain, grid, density, and configuration types shared by all solvers.

The state space is an axis-aligned closed box in one or two dimensions.
Densities and Schrodinger factors live on uniform tensor grids that include
the boundary nodes; integrals are tensor-product trapezoidal quadrature,
whose weights double as finite-volume cell sizes elsewhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BoxBridgeError",
    "ConfigError",
    "ZeroMassError",
    "OutOfDomainError",
    "DivergedError",
    "LinearSolveFailure",
    "ProxNoConvergeError",
    "DomainMismatchError",
    "NonPositiveError",
    "FloorDominantError",
    "MaxIterationsError",
    "ControlOutOfRangeError",
    "MissingSolutionError",
    "ExpressionError",
    "BoxDomain",
    "Grid",
    "GridDensity",
    "DriftSpec",
    "SolverConfig",
    "trapezoid_mass",
    "normalize",
    "check_same_grid",
    "l1_distance",
    "density_cdf",
    "inverse_cdf",
]


class BoxBridgeError(Exception):
    """Base class for all solver errors."""


class ConfigError(BoxBridgeError):
    """Raised when a user-supplied parameter is invalid."""


class ZeroMassError(BoxBridgeError):
    """Raised when a density has nonpositive total mass."""


class OutOfDomainError(BoxBridgeError):
    """Raised when a point falls outside the box."""


class DivergedError(BoxBridgeError):
    """Raised when a series truncation would need too many terms."""


class LinearSolveFailure(BoxBridgeError):
    """Raised when an implicit-step linear system cannot be solved."""


class ProxNoConvergeError(BoxBridgeError):
    """Raised when the proximal inner iteration fails to converge."""


class DomainMismatchError(BoxBridgeError):
    """Raised when two fields live on different grids or domains."""


class NonPositiveError(BoxBridgeError):
    """Raised when a strictly positive field has a nonpositive node."""


class FloorDominantError(BoxBridgeError):
    """Raised when Hadamard division floors too many nodes in the support."""


class MaxIterationsError(BoxBridgeError):
    """Raised when the fixed-point loop exhausts its iteration budget."""

    def __init__(self, message, residual_trace=None):
        super().__init__(message)
        self.residual_trace = [] if residual_trace is None else residual_trace


class ControlOutOfRangeError(BoxBridgeError):
    """Raised when a control field is queried outside its domain."""


class MissingSolutionError(BoxBridgeError):
    """Raised when closed-loop simulation lacks a prior solve artifact."""


class ExpressionError(BoxBridgeError):
    """Raised on a malformed scenario expression; names the offending token."""


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned closed box [lower_1, upper_1] x ... x [lower_n, upper_n].

    Parameters
    ----------
    lower, upper : sequence of float
        Box corners; lower[i] < upper[i] for all axes.  Only one- and
        two-dimensional boxes are supported.
    """

    lower: tuple
    upper: tuple

    def __init__(self, lower: Sequence[float], upper: Sequence[float]):
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        if len(lower) != len(upper):
            raise ConfigError(
                f"lower has {len(lower)} axes, upper has {len(upper)}")
        if len(lower) not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {len(lower)}")
        for lo, hi in zip(lower, upper):
            if not lo < hi:
                raise ConfigError(f"need lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def side_lengths(self) -> tuple:
        return tuple(hi - lo for lo, hi in zip(self.lower, self.upper))

    def contains(self, points) -> np.ndarray:
        """Elementwise membership test for points of shape (..., dim)."""
        pts = np.asarray(points, dtype=float)
        if self.dim == 1 and pts.ndim <= 1:
            pts = pts.reshape(-1, 1)
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)


class Grid:
    """Uniform tensor grid on a box, boundary nodes included.

    Attributes
    ----------
    domain : BoxDomain
    points_per_axis : tuple of int
        At least 3 nodes per axis.
    spacing : tuple of float
        (upper - lower) / (points - 1) per axis.
    axes : tuple of ndarray
        Node coordinates per axis.
    axis_weights : tuple of ndarray
        Trapezoid weights per axis (h/2 at the ends, h inside); these are
        also the finite-volume cell widths.
    weights : ndarray
        Tensor-product quadrature weights, shaped like nodal fields.
    """

    def __init__(self, domain: BoxDomain, points_per_axis):
        pts = tuple(int(p) for p in np.atleast_1d(points_per_axis))
        if len(pts) != domain.dim:
            raise DomainMismatchError(
                f"{len(pts)} axis counts for a {domain.dim}-d domain")
        if any(p < 3 for p in pts):
            raise ConfigError("need at least 3 points per axis")
        self.domain = domain
        self.points_per_axis = pts
        self.spacing = tuple(
            (hi - lo) / (p - 1)
            for lo, hi, p in zip(domain.lower, domain.upper, pts))
        self.axes = tuple(
            np.linspace(lo, hi, p)
            for lo, hi, p in zip(domain.lower, domain.upper, pts))
        aw = []
        for h, p in zip(self.spacing, pts):
            wa = np.full(p, h)
            wa[0] = wa[-1] = h / 2
            aw.append(wa)
        self.axis_weights = tuple(aw)
        if domain.dim == 1:
            self.weights = aw[0]
        else:
            self.weights = np.outer(aw[0], aw[1])

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def shape(self) -> tuple:
        return self.points_per_axis

    def meshgrid(self):
        """Nodal coordinate arrays, shaped like nodal fields."""
        if self.dim == 1:
            return (self.axes[0],)
        return np.meshgrid(self.axes[0], self.axes[1], indexing="ij")

    def same_as(self, other: "Grid") -> bool:
        return (self.domain == other.domain
                and self.points_per_axis == other.points_per_axis)


class GridDensity:
    """Nonnegative nodal values on a grid, with trapezoidal mass.

    Also used (with `require_nonnegative=False` sites avoided; factors are
    simply kept positive) for the unnormalized Schrodinger factors phi,
    phihat and the reversed-time transform p, which share grid and
    quadrature but not the unit-mass convention.
    """

    def __init__(self, grid: Grid, values, normalized: bool = False):
        vals = np.asarray(values, dtype=float)
        if vals.shape != grid.shape:
            raise DomainMismatchError(
                f"values shape {vals.shape} does not match grid {grid.shape}")
        if np.any(vals < 0):
            raise NonPositiveError("density values must be nonnegative")
        if not np.all(np.isfinite(vals)):
            raise NonPositiveError("density values must be finite")
        self.grid = grid
        self.values = vals
        self.normalized = bool(normalized)
        if self.normalized and abs(self.mass - 1.0) > 1e-12:
            raise ZeroMassError(
                f"normalized flag set but mass deviates by {abs(self.mass-1.0):.2e}")

    @property
    def mass(self) -> float:
        return float((self.grid.weights * self.values).sum())

    def with_values(self, values, normalized: bool = False) -> "GridDensity":
        return GridDensity(self.grid, values, normalized)

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable) -> "GridDensity":
        """Sample fn on the grid nodes; fn takes one coordinate array per axis."""
        vals = np.asarray(fn(*grid.meshgrid()), dtype=float)
        vals = np.broadcast_to(vals, grid.shape).copy()
        return cls(grid, vals)


def trapezoid_mass(d: GridDensity) -> float:
    """Tensor-product trapezoidal quadrature of the nodal values."""
    return d.mass


def normalize(d: GridDensity) -> GridDensity:
    """Scale to unit mass and set the normalized flag.

    Raises
    ------
    ZeroMassError
        If the mass is not strictly positive.
    """
    m = d.mass
    if not m > 0:
        raise ZeroMassError(f"cannot normalize mass {m}")
    return GridDensity(d.grid, d.values / m, normalized=True)


def check_same_grid(*fields: GridDensity) -> Grid:
    g = fields[0].grid
    for f in fields[1:]:
        if not g.same_as(f.grid):
            raise DomainMismatchError("fields live on different grids")
    return g


def l1_distance(d0: GridDensity, d1: GridDensity) -> float:
    """Trapezoid quadrature of |d0 - d1| on their shared grid."""
    g = check_same_grid(d0, d1)
    return float(np.sum(g.weights * np.abs(d0.values - d1.values)))


@dataclass(frozen=True)
class DriftSpec:
    """Prior drift: zero, or the gradient field f = -grad V.

    Parameters
    ----------
    kind : {"zero", "gradient"}
    potential : callable, optional
        V as a function of the coordinate arrays (one per axis).
    gradient : callable, optional
        grad V with the same signature, returning one array per axis.
        Both must be supplied for kind="gradient" and be finite on the box.
    """

    kind: str = "zero"
    potential: Callable | None = None
    gradient: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "gradient"):
            raise ConfigError(f"unknown drift kind {self.kind!r}")
        if self.kind == "gradient" and (self.potential is None or self.gradient is None):
            raise ConfigError("gradient drift needs potential and gradient")

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls()

    @classmethod
    def from_potential(cls, potential: Callable, gradient: Callable) -> "DriftSpec":
        return cls("gradient", potential, gradient)

    def potential_on(self, grid: Grid) -> np.ndarray:
        """Nodal potential; identically zero for zero drift."""
        if self.kind == "zero":
            return np.zeros(grid.shape)
        vals = np.asarray(self.potential(*grid.meshgrid()), dtype=float)
        vals = np.broadcast_to(vals, grid.shape)
        if not np.all(np.isfinite(vals)):
            raise NonPositiveError("potential must be finite on the box")
        return vals.copy()

    def drift_at(self, points: np.ndarray) -> np.ndarray:
        """Drift f = -grad V at points of shape (m, dim); zero drift gives 0."""
        pts = np.asarray(points, dtype=float)
        squeeze = pts.ndim == 1
        if squeeze:
            pts = pts[:, None]
        if self.kind == "zero":
            out = np.zeros_like(pts)
        else:
            comps = self.gradient(*(pts[:, k] for k in range(pts.shape[1])))
            if not isinstance(comps, (tuple, list)):
                comps = (comps,)
            out = -np.stack(
                [np.broadcast_to(np.asarray(c, dtype=float), pts.shape[0])
                 for c in comps], axis=1)
        return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class SolverConfig:
    """Shared solver settings.

    theta is the thermodynamic temperature of the prior diffusion; the
    horizon is fixed to [0, 1].  density_floor is relative to the peak of
    the divisor in Hadamard divisions.
    """

    theta: float = 0.5
    horizon: float = 1.0
    time_steps: int = 1000
    series_terms: int = 100
    fp_tol: float = 1e-9
    fp_max_iter: int = 200
    density_floor: float = 1e-12

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        if self.horizon != 1.0:
            raise ConfigError("the horizon is fixed to [0, 1]")
        if self.time_steps < 1 or self.series_terms < 1 or self.fp_max_iter < 1:
            raise ConfigError("counts must be positive")
        if not self.fp_tol > 0:
            raise ConfigError("fp_tol must be positive")
        if not 0 < self.density_floor <= 1e-6:
            raise ConfigError("density_floor must lie in (0, 1e-6]")

    @property
    def dt(self) -> float:
        return self.horizon / self.time_steps


# ---------------------------------------------------------------------------
# CDF utilities for one-dimensional piecewise-linear nodal densities.  The
# density is linear on each grid cell, so the CDF is piecewise quadratic and
# both evaluation and inversion are exact.

def _cell_cdf(d: GridDensity):
    grid = d.grid
    if grid.dim != 1:
        raise DomainMismatchError("CDF utilities are one-dimensional")
    h = grid.spacing[0]
    vals = d.values
    cell_mass = 0.5 * (vals[:-1] + vals[1:]) * h
    F = np.concatenate([[0.0], np.cumsum(cell_mass)])
    if not F[-1] > 0:
        raise ZeroMassError("density has zero mass")
    return F, h


def density_cdf(d: GridDensity, z) -> np.ndarray:
    """Exact CDF of the piecewise-linear density at query points z."""
    F, h = _cell_cdf(d)
    xs = d.grid.axes[0]
    z = np.asarray(z, dtype=float)
    if np.any(z < xs[0]) or np.any(z > xs[-1]):
        raise OutOfDomainError("CDF query outside the box")
    idx = np.clip(np.searchsorted(xs, z, side="right") - 1, 0, xs.size - 2)
    s = z - xs[idx]
    rl = d.values[idx]
    slope = (d.values[idx + 1] - rl) / h
    return (F[idx] + rl * s + 0.5 * slope * s * s) / F[-1]


def inverse_cdf(d: GridDensity, u) -> np.ndarray:
    """Exact inverse CDF (quantile function) at levels u in [0, 1].

    Inverts the piecewise-quadratic CDF cell by cell: with left nodal value
    rho_l and in-cell slope k, the offset s solves
    rho_l s + k s^2 / 2 = m for the residual mass m.
    """
    F, h = _cell_cdf(d)
    xs = d.grid.axes[0]
    u = np.asarray(u, dtype=float)
    target = u * F[-1]
    idx = np.clip(np.searchsorted(F, target, side="right") - 1, 0, xs.size - 2)
    m = target - F[idx]
    rl = d.values[idx]
    slope = (d.values[idx + 1] - rl) / h
    s = np.empty_like(m)
    lin = np.abs(slope) * h < 1e-12 * np.maximum(rl, 1e-300)
    s[lin] = m[lin] / np.maximum(rl[lin], 1e-300)
    nl = ~lin
    disc = rl[nl] ** 2 + 2.0 * slope[nl] * m[nl]
    s[nl] = (np.sqrt(np.maximum(disc, 0.0)) - rl[nl]) / slope[nl]
    return xs[idx] + np.clip(s, 0.0, h)
