"""Scikit-learn style front end over the fixed-point bridge solver.

ReflectedBridge packages the common workflow (build grid, resolve endpoint
densities, pick a propagation engine, run the fixed point, sample paths)
behind a single fit/predict-shaped object with get_params/set_params
support, so it composes with standard tooling for cloning and grid search.
The functional API in bridge and sde remains the primary surface; this
class only orchestrates it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import sde
from .bridge import BridgeSolution, FpkEngine, KernelEngine, solve
from .core import (
    BoxDomain,
    ConfigError,
    DriftSpec,
    Grid,
    GridDensity,
    MissingSolutionError,
    SolverConfig,
    normalize,
)
from .expressions import parse_expression
from .fpk import FpkProblem

__all__ = ["ReflectedBridge"]


class ReflectedBridge(BaseEstimator):
    """Steer a start density into a target density on a box.

    Parameters
    ----------
    lower, upper : float or sequence of float
        Box corners; scalars give a one-dimensional interval.
    theta : float
        Diffusion temperature (noise intensity sqrt(2 theta) dW).
    points_per_axis : int or sequence of int
        Grid resolution per axis.
    engine : {"kernel", "fpk"}
        Propagator for the factor equations.  "kernel" is the exact
        cosine-series heat semigroup and requires zero prior drift;
        "fpk" is the conservative finite-volume stepper and supports
        a gradient drift through `potential`.
    potential : str, optional
        Prior drift potential V in the expression grammar (drift is
        -grad V); requires engine="fpk".  None means zero prior drift.
    series_terms : int
        Cosine modes per axis for the kernel engine.
    time_steps : int
        Implicit-Euler steps over the unit horizon (fpk engine and
        path simulation).
    fp_tol : float
        Projective-metric stopping tolerance of the fixed point.
    fp_max_iter : int
        Iteration cap before MaxIterationsError.
    density_floor : float
        Relative floor guarding the endpoint divisions.
    n_snapshots : int
        Stored time slices of the solved flow and control.

    Attributes
    ----------
    grid_ : Grid
    drift_ : DriftSpec
    config_ : SolverConfig
    rho0_, rho1_ : GridDensity
        Normalized endpoint densities actually used.
    solution_ : BridgeSolution
    n_iter_ : int
    residual_trace_ : ndarray of shape (n_iter_, 2)
    """

    def __init__(self, lower=-4.0, upper=4.0, theta=0.5, points_per_axis=801,
                 engine="kernel", potential=None, series_terms=100,
                 time_steps=1000, fp_tol=1e-9, fp_max_iter=200,
                 density_floor=1e-12, n_snapshots=11):
        self.lower = lower
        self.upper = upper
        self.theta = theta
        self.points_per_axis = points_per_axis
        self.engine = engine
        self.potential = potential
        self.series_terms = series_terms
        self.time_steps = time_steps
        self.fp_tol = fp_tol
        self.fp_max_iter = fp_max_iter
        self.density_floor = density_floor
        self.n_snapshots = n_snapshots

    def _resolve_density(self, source, grid: Grid, name: str) -> GridDensity:
        if isinstance(source, GridDensity):
            if not source.grid.same_as(grid):
                raise ConfigError(f"{name} lives on a different grid")
            return normalize(source)
        if isinstance(source, str):
            expr = parse_expression(source, grid.dim)
            return normalize(GridDensity.from_callable(grid, expr.evaluate))
        if callable(source):
            return normalize(GridDensity.from_callable(grid, source))
        values = np.asarray(source, dtype=float)
        if values.shape != grid.shape:
            raise ConfigError(
                f"{name} array has shape {values.shape}, grid is {grid.shape}")
        return normalize(GridDensity(grid, values))

    def _resolve_drift(self, grid: Grid) -> DriftSpec:
        if self.potential is None:
            return DriftSpec.zero()
        if isinstance(self.potential, DriftSpec):
            return self.potential
        if not isinstance(self.potential, str):
            raise ConfigError("potential must be None, an expression string, "
                              "or a DriftSpec")
        expr = parse_expression(self.potential, grid.dim)
        parts = expr.gradient()

        def grad(*coords):
            return tuple(p(*coords) for p in parts)

        return DriftSpec.from_potential(expr.evaluate, grad)

    def fit(self, rho0, rho1) -> "ReflectedBridge":
        """Solve the steering problem between two densities.

        Parameters
        ----------
        rho0, rho1 : GridDensity, str, callable, or array
            Start and target densities: expression strings in the
            scenario grammar, callables of the coordinate arrays, nodal
            value arrays, or ready GridDensity objects on the same grid.
            Inputs are normalized to unit mass.
        """
        domain = BoxDomain(self.lower, self.upper)
        pts = self.points_per_axis
        if np.ndim(pts) == 0:
            pts = (int(pts),) * domain.dim
        grid = Grid(domain, pts)
        config = SolverConfig(theta=self.theta, time_steps=self.time_steps,
                              series_terms=self.series_terms,
                              fp_tol=self.fp_tol,
                              fp_max_iter=self.fp_max_iter,
                              density_floor=self.density_floor)
        drift = self._resolve_drift(grid)
        if self.engine == "kernel":
            if drift.kind != "zero":
                raise ConfigError(
                    "kernel engine propagates zero-drift diffusion only; "
                    "use engine='fpk' with a potential")
            engine = KernelEngine(grid, config.theta, config.series_terms,
                                  config.density_floor)
        elif self.engine == "fpk":
            problem = FpkProblem(grid, drift, config.theta, dt=config.dt)
            engine = FpkEngine(problem, config.density_floor)
        else:
            raise ConfigError(f"unknown engine {self.engine!r}")

        rho0 = self._resolve_density(rho0, grid, "rho0")
        rho1 = self._resolve_density(rho1, grid, "rho1")

        self.grid_ = grid
        self.drift_ = drift
        self.config_ = config
        self.rho0_ = rho0
        self.rho1_ = rho1
        self.solution_ = solve(rho0, rho1, config, engine,
                               n_snapshots=self.n_snapshots)
        self.n_iter_ = self.solution_.n_iterations
        self.residual_trace_ = self.solution_.residual_trace
        return self

    def _require_fitted(self) -> BridgeSolution:
        if not hasattr(self, "solution_"):
            raise MissingSolutionError(
                "this ReflectedBridge is not fitted yet; call fit first")
        return self.solution_

    def density_at(self, t: float) -> GridDensity:
        """Optimally steered density at the stored time nearest t."""
        return self._require_fitted().density_at(t)

    def control_at(self, t: float, points) -> np.ndarray:
        """Optimal feedback control at points.

        Shape (m, dim), squeezed to (m,) for one-dimensional queries on
        a one-dimensional box.
        """
        return self._require_fitted().as_control_field().at(t, points)

    def sample_paths(self, n_paths: int, seed=0,
                     closed_loop: bool = True) -> "sde.PathEnsemble":
        """Simulate reflected paths from the fitted start density.

        closed_loop=True applies the solved control; False gives the
        uncontrolled prior diffusion for comparison.
        """
        sol = self._require_fitted()
        control = sol.as_control_field() if closed_loop else None
        return sde.simulate(n_paths, self.drift_, self.rho0_, self.config_,
                            seed, control=control)
