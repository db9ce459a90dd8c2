"""Fixed-point solver for density steering between two endpoint laws.

Iterates half-bridge sweeps over the factor pair (phi1, phihat0): march
phi1 backward to get phi0, divide rho0 by it, march the quotient forward,
divide rho1 by the result.  The sweep contracts in the Hilbert projective
metric, and the converged factors reconstruct the optimal density flow
rho_opt = phi * phihat and feedback control u_opt = 2 theta grad log phi.

Two interchangeable propagation engines drive the marches: an exact
cosine-series heat semigroup for zero prior drift (KernelEngine, tensor
product per axis in 2D), and the implicit finite-volume stepper for
gradient drifts (FpkEngine).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    ConfigError,
    DomainMismatchError,
    FloorDominantError,
    Grid,
    GridDensity,
    MaxIterationsError,
    NonPositiveError,
    SolverConfig,
    ZeroMassError,
    check_same_grid,
)
from .fpk import FpkProblem
from .kernel1d import ReflectedHeatKernel

__all__ = [
    "FactorPair",
    "Snapshot",
    "BridgeSolution",
    "KernelEngine",
    "FpkEngine",
    "hilbert_metric",
    "half_bridge",
    "solve",
    "control_field",
]


def _hilbert(u: np.ndarray, v: np.ndarray) -> float:
    if np.any(u <= 0) or np.any(v <= 0):
        raise NonPositiveError("Hilbert metric needs strictly positive fields")
    ratio = u / v
    return float(np.log(ratio.max()) - np.log(ratio.min()))


def hilbert_metric(u: GridDensity, v: GridDensity) -> float:
    """Projective distance log max(u/v) - log min(u/v) on a shared grid.

    Zero exactly on rays u = c v, c > 0, which is the right notion of
    convergence for factors that are only determined up to scale.
    """
    check_same_grid(u, v)
    return _hilbert(u.values, v.values)


@dataclass(frozen=True)
class FactorPair:
    """The iterated pair: terminal factor phi1 and initial cofactor phihat0.

    Both are unnormalized strictly positive nodal fields on one grid.  The
    projective freedom (c phi1, phihat0 / c) is fixed by the recorded
    convention: phihat0 carries unit mass and every scale sits in phi1.
    """

    phi1: GridDensity
    phihat0: GridDensity
    normalization: str = "phihat0-unit-mass"

    def __post_init__(self):
        check_same_grid(self.phi1, self.phihat0)
        if np.any(self.phi1.values <= 0) or np.any(self.phihat0.values <= 0):
            raise NonPositiveError("factors must be strictly positive")
        if self.normalization != "phihat0-unit-mass":
            raise ConfigError(
                f"unknown normalization convention {self.normalization!r}")
        if abs(self.phihat0.mass - 1.0) > 1e-8:
            raise ZeroMassError("phihat0 must carry unit mass")


class Snapshot(NamedTuple):
    """Reconstructed state at one time: factors and their product density."""

    t: float
    phi: GridDensity
    phihat: GridDensity
    rho_opt: GridDensity


class _AxisSeries:
    """Cached cosine eigenbasis of the reflected heat flow along one axis."""

    def __init__(self, axis: np.ndarray, weight: np.ndarray, theta: float,
                 terms: int):
        self.width = float(axis[-1] - axis[0])
        self.w = weight
        m = np.arange(1, terms + 1)
        self.cx = np.cos(np.outer(axis - axis[0], m) * (np.pi / self.width))
        self.rates = theta * (np.pi * m / self.width) ** 2

    def apply(self, values: np.ndarray, t: float, axis: int) -> np.ndarray:
        """Heat semigroup at elapsed time t along one tensor axis."""
        v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
        lead = v.shape[0]
        flat = v.reshape(lead, -1)
        wv = self.w[:, None] * flat
        mean = wv.sum(axis=0) / self.width
        coef = self.cx.T @ wv
        decay = np.exp(-self.rates * t)
        out = mean[None, :] + (2.0 / self.width) * (self.cx * decay[None, :]) @ coef
        return np.moveaxis(out.reshape(v.shape), 0, axis)


class KernelEngine:
    """Exact zero-drift propagation by the reflected heat eigenexpansion.

    Marches are single semigroup applications (tensor product over axes in
    2D), so snapshot times need not align with any step grid.  The spectral
    apply is self-adjoint under the trapezoid weights, which makes the
    pairing of forward and backward factors time-invariant to rounding.
    """

    def __init__(self, grid: Grid, theta: float, series_terms: int = 100,
                 density_floor: float = 1e-12):
        if not theta > 0:
            raise ConfigError("theta must be positive")
        if series_terms < 1:
            raise ConfigError("series_terms must be positive")
        self.grid = grid
        self.theta = float(theta)
        self.series_terms = int(series_terms)
        self.density_floor = float(density_floor)
        self._axes = tuple(
            _AxisSeries(ax, w, self.theta, self.series_terms)
            for ax, w in zip(grid.axes, grid.axis_weights))

    def _propagate(self, values: np.ndarray, elapsed: float) -> np.ndarray:
        out = np.asarray(values, dtype=float)
        if elapsed == 0.0:
            return out.copy()
        for axis, series in enumerate(self._axes):
            out = series.apply(out, elapsed, axis)
        return out

    def run_forward(self, values: np.ndarray,
                    times: Sequence[float]) -> list[np.ndarray]:
        """Snapshots of the forward flow started at t = 0."""
        return [self._propagate(values, t) for t in times]

    def run_backward(self, values: np.ndarray,
                     times: Sequence[float]) -> list[np.ndarray]:
        """Snapshots of the backward factor flow ending at t = 1.

        For zero drift the factor equation is the same heat flow run over
        the remaining span, so the snapshot at time t propagates over
        1 - t.
        """
        return [self._propagate(values, 1.0 - t) for t in times]


class FpkEngine:
    """Propagation by the implicit finite-volume stepper (gradient drift).

    Snapshot times snap to the nearest step of the problem's time grid;
    with aligned snapshot counts (the default 11 on 1000 steps) this is
    exact.
    """

    def __init__(self, problem: FpkProblem, density_floor: float = 1e-12):
        n_steps = 1.0 / problem.dt
        if abs(n_steps - round(n_steps)) > 1e-9:
            raise ConfigError("problem.dt must divide the unit horizon")
        self.problem = problem
        self.n_steps = int(round(n_steps))
        self.density_floor = float(density_floor)

    @property
    def grid(self) -> Grid:
        return self.problem.grid

    @property
    def theta(self) -> float:
        return self.problem.theta

    def _steps(self, times: Sequence[float]) -> list[int]:
        return [int(round(float(t) * self.n_steps)) for t in times]

    def run_forward(self, values: np.ndarray,
                    times: Sequence[float]) -> list[np.ndarray]:
        ks = self._steps(times)
        _, snaps = self.problem.march_values(values, self.n_steps, capture=ks)
        return [snaps[k] for k in ks]

    def run_backward(self, values: np.ndarray,
                     times: Sequence[float]) -> list[np.ndarray]:
        ks = self._steps(times)
        _, snaps = self.problem.march_factor_values(values, self.n_steps,
                                                    capture=ks)
        return [snaps[k] for k in ks]


def _as_engine(problem, config: SolverConfig, grid: Grid):
    """Wrap a propagation problem into an engine consistent with config."""
    if isinstance(problem, (KernelEngine, FpkEngine)):
        if problem.theta != config.theta:
            raise ConfigError("engine theta differs from config.theta")
        engine = problem
    elif isinstance(problem, ReflectedHeatKernel):
        if grid.dim != 1 or grid.domain != problem.interval:
            raise DomainMismatchError("kernel interval does not cover the grid")
        if problem.theta != config.theta:
            raise ConfigError("kernel theta differs from config.theta")
        engine = KernelEngine(grid, problem.theta, problem.series_terms,
                              config.density_floor)
    elif isinstance(problem, FpkProblem):
        if problem.theta != config.theta:
            raise ConfigError("problem theta differs from config.theta")
        if abs(problem.dt * config.time_steps - 1.0) > 1e-9:
            raise ConfigError("problem.dt is inconsistent with config.time_steps")
        engine = FpkEngine(problem, config.density_floor)
    else:
        raise ConfigError(f"unsupported problem type {type(problem).__name__}")
    if not engine.grid.same_as(grid):
        raise DomainMismatchError("engine grid does not match the densities")
    return engine


def _guarded_divide(numer: np.ndarray, denom: np.ndarray,
                    floor: float) -> np.ndarray:
    """Hadamard division with a relative floor on the divisor.

    The divisor is floored at floor * max(denom); the quotient is then
    lifted to floor * (smallest positive quotient) so downstream factors
    stay strictly positive even where the numerator vanishes (compactly
    supported endpoints).  Tying the lift to the smallest genuine value
    rather than the largest keeps it from overwriting real quotients when
    the factors span many orders of magnitude.  Raises FloorDominant when
    more than 1% of the nodes in the numerator's support needed the
    divisor floor, which signals that the propagated factor has collapsed
    relative to the target density.
    """
    floor_abs = floor * float(denom.max())
    if not floor_abs > 0:
        raise NonPositiveError("divisor field has no positive values")
    support = numer > 0
    bad = int(np.count_nonzero(support & (denom < floor_abs)))
    if bad > 0.01 * max(int(np.count_nonzero(support)), 1):
        raise FloorDominantError(
            f"divisor floored on {bad} support nodes; grid and endpoint "
            "supports are incompatible")
    q = numer / np.maximum(denom, floor_abs)
    lift = floor * float(q[q > 0].min())
    if not lift > 0:  # product underflowed; any positive value works here
        lift = float(np.finfo(float).tiny)
    return np.maximum(q, lift)


def half_bridge(fp: FactorPair, engine, rho0: GridDensity,
                rho1: GridDensity) -> FactorPair:
    """One full sweep of the fixed-point loop on the factor pair.

    phi1 marches backward over [0, 1] to phi0; rho0 divided by phi0 gives
    the new phihat0 (rescaled to unit mass); phihat0 marches forward to
    phihat1; rho1 divided by phihat1 gives the new phi1.  The incoming
    phihat0 never enters: the sweep is a self-map of phi1 with the
    cofactor recomputed en route.
    """
    grid = check_same_grid(fp.phi1, rho0, rho1)
    if not engine.grid.same_as(grid):
        raise DomainMismatchError("engine grid does not match the densities")
    floor = engine.density_floor
    phi0 = engine.run_backward(fp.phi1.values, (0.0,))[0]
    phihat0 = _guarded_divide(rho0.values, phi0, floor)
    phihat0 = phihat0 / float((grid.weights * phihat0).sum())
    phihat1 = engine.run_forward(phihat0, (1.0,))[0]
    phi1 = _guarded_divide(rho1.values, phihat1, floor)
    return FactorPair(GridDensity(grid, phi1), GridDensity(grid, phihat0))


def _log_gradient_field(phi: np.ndarray, grid: Grid,
                        theta: float) -> np.ndarray:
    """Control 2 theta grad log phi with exactly zero wall-normal component.

    Central differences at interior nodes, one-sided at walls; the normal
    component is then overwritten with 0 on each wall, matching the zero
    normal derivative the continuous factor satisfies.
    """
    if np.any(phi <= 0):
        raise NonPositiveError("control needs a strictly positive factor")
    log_phi = np.log(phi)
    if grid.dim == 1:
        grads = [np.gradient(log_phi, grid.spacing[0])]
    else:
        grads = list(np.gradient(log_phi, *grid.spacing))
    field = 2.0 * theta * np.stack(grads, axis=-1)
    for ax in range(grid.dim):
        idx = [slice(None)] * (grid.dim + 1)
        idx[-1] = ax
        for edge in (0, -1):
            idx[ax] = edge
            field[tuple(idx)] = 0.0
    return field


class BridgeSolution:
    """Converged bridge: snapshot triples, control stack and residual log.

    Attributes
    ----------
    times : ndarray, shape (n_snapshots,)
    snapshots : list of Snapshot
        (t, phi, phihat, rho_opt) per time; rho_opt = phi * phihat nodewise
        with unit mass to 1e-6.
    control : ndarray, shape (n_snapshots,) + grid.shape + (dim,)
        Nodal 2 theta grad log phi with zero wall-normal component.
    residual_trace : ndarray, shape (n_iterations, 2)
        Hilbert-metric distances between successive (phi1, phihat0)
        iterates.
    factors : FactorPair
        Converged pair, phihat0 normalized to unit mass.
    """

    def __init__(self, grid: Grid, theta: float, times: np.ndarray,
                 snapshots: list[Snapshot], control: np.ndarray,
                 residual_trace: np.ndarray, factors: FactorPair,
                 engine_kind: str):
        self.grid = grid
        self.theta = float(theta)
        self.times = times
        self.snapshots = snapshots
        self.control = control
        self.residual_trace = residual_trace
        self.factors = factors
        self.engine_kind = engine_kind
        for arr in (self.times, self.control, self.residual_trace):
            arr.setflags(write=False)

    @property
    def n_iterations(self) -> int:
        return self.residual_trace.shape[0]

    def density_at(self, t: float) -> GridDensity:
        """rho_opt at the snapshot time nearest to t."""
        return self.snapshots[self._nearest(t)].rho_opt

    def _nearest(self, t: float) -> int:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"t = {t} outside [0, 1]")
        return int(np.argmin(np.abs(self.times - t)))

    def as_control_field(self):
        """Space-time interpolating view for closed-loop path simulation."""
        from .sde import ControlField

        return ControlField(self.times, self.grid, self.control)


def control_field(sol: BridgeSolution, t: float) -> np.ndarray:
    """Nodal control vectors at the snapshot time nearest to t.

    Shape grid.shape + (dim,); the wall-normal component is exactly zero.
    """
    return sol.control[sol._nearest(t)].copy()


def solve(rho0: GridDensity, rho1: GridDensity, config: SolverConfig,
          problem, n_snapshots: int = 11,
          initial_phi1: GridDensity | None = None) -> BridgeSolution:
    """Steer rho0 into rho1: run the fixed-point loop and reconstruct.

    Parameters
    ----------
    rho0, rho1 : GridDensity
        Unit-mass endpoint densities on a common grid.
    config : SolverConfig
        Tolerances, iteration budget, density floor, theta.
    problem : ReflectedHeatKernel, FpkProblem, KernelEngine or FpkEngine
        Propagation backend; must match the grid and config.theta.
    n_snapshots : int
        Uniform reconstruction times on [0, 1], endpoints included.
    initial_phi1 : GridDensity, optional
        Strictly positive seed for the terminal factor; defaults to the
        constant 1.  The converged fields do not depend on it (the loop
        contracts to a fixed point that is unique up to scale).

    Returns
    -------
    BridgeSolution

    Raises
    ------
    MaxIterationsError
        If either factor's Hilbert residual stays above config.fp_tol for
        config.fp_max_iter sweeps; carries the residual trace.
    FloorDominantError
        Propagated from half_bridge when supports are incompatible.
    """
    grid = check_same_grid(rho0, rho1)
    if abs(rho0.mass - 1.0) > 1e-8 or abs(rho1.mass - 1.0) > 1e-8:
        raise ConfigError("endpoint densities must carry unit mass")
    if n_snapshots < 2:
        raise ConfigError("need at least the two endpoint snapshots")
    engine = _as_engine(problem, config, grid)

    volume = float(np.prod(grid.domain.side_lengths()))
    if initial_phi1 is None:
        initial_phi1 = GridDensity(grid, np.ones(grid.shape))
    fp = FactorPair(initial_phi1,
                    GridDensity(grid, np.full(grid.shape, 1.0 / volume)))
    trace = []
    converged = False
    for _ in range(config.fp_max_iter):
        new = half_bridge(fp, engine, rho0, rho1)
        trace.append((_hilbert(new.phi1.values, fp.phi1.values),
                      _hilbert(new.phihat0.values, fp.phihat0.values)))
        fp = new
        if max(trace[-1]) < config.fp_tol:
            converged = True
            break
    residual_trace = np.array(trace).reshape(len(trace), 2)
    if not converged:
        raise MaxIterationsError(
            f"no convergence in {config.fp_max_iter} sweeps "
            f"(last residuals {trace[-1]})", residual_trace)

    times = np.linspace(0.0, 1.0, n_snapshots)
    phis = engine.run_backward(fp.phi1.values, times)
    phihats = engine.run_forward(fp.phihat0.values, times)
    snapshots = []
    control = np.empty((n_snapshots,) + grid.shape + (grid.dim,))
    for i, t in enumerate(times):
        rho_vals = phis[i] * phihats[i]
        rho = GridDensity(grid, rho_vals)
        if abs(rho.mass - 1.0) > 1e-6:
            raise ZeroMassError(
                f"snapshot at t = {t} has mass {rho.mass:.9f}")
        snapshots.append(Snapshot(float(t), GridDensity(grid, phis[i]),
                                  GridDensity(grid, phihats[i]), rho))
        control[i] = _log_gradient_field(phis[i], grid, engine.theta)
    kind = "kernel" if isinstance(engine, KernelEngine) else "fpk"
    return BridgeSolution(grid, engine.theta, times, snapshots, control,
                          residual_trace, fp, kind)
