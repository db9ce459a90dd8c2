"""Reflected Euler-Maruyama path ensembles on a box.

Simulates dx = (f + u) dt + sqrt(2 theta) dw inside a closed box, folding
each coordinate back through the two-sided Skorokhod projection and
accumulating the boundary local times.  Used both open loop (u = 0) and
closed loop with an interpolated control field, plus the sampling and
histogram helpers needed to compare path statistics against grid densities.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .core import (
    BoxDomain,
    ConfigError,
    ControlOutOfRangeError,
    DomainMismatchError,
    DriftSpec,
    Grid,
    GridDensity,
    NonPositiveError,
    OutOfDomainError,
    SolverConfig,
    density_cdf,
    inverse_cdf,
    normalize,
)

__all__ = [
    "ControlField",
    "PathEnsemble",
    "skorokhod_step_1d",
    "simulate",
    "empirical_marginal",
    "inverse_cdf_sample",
    "ks_statistic",
    "write_ensemble_csv",
]


def skorokhod_step_1d(x_prev, increment, interval: BoxDomain):
    """One reflected step on an interval: project x_prev + increment back.

    Parameters
    ----------
    x_prev : float or ndarray
        Current positions, all inside the interval.
    increment : float or ndarray
        Unconstrained displacement over the step.
    interval : BoxDomain
        One-dimensional box [a, b].

    Returns
    -------
    x_new, dL, dU : float or ndarray
        Projected position and the local-time increments spent on the lower
        and upper wall.  With candidate c = x_prev + increment: c < a gives
        (a, a - c, 0), c > b gives (b, 0, c - b), otherwise (c, 0, 0).
        At most one of dL, dU is nonzero.
    """
    if interval.dim != 1:
        raise DomainMismatchError("skorokhod_step_1d needs a 1D interval")
    a, b = interval.lower[0], interval.upper[0]
    x_prev = np.asarray(x_prev, dtype=float)
    if np.any(x_prev < a) or np.any(x_prev > b):
        raise OutOfDomainError("x_prev must lie inside the interval")
    c = x_prev + np.asarray(increment, dtype=float)
    d_lower = np.maximum(a - c, 0.0)
    d_upper = np.maximum(c - b, 0.0)
    x_new = np.clip(c, a, b)
    if x_new.ndim == 0:
        return float(x_new), float(d_lower), float(d_upper)
    return x_new, d_lower, d_upper


class ControlField:
    """Time-indexed nodal vector field with space-time interpolation.

    Parameters
    ----------
    times : array_like
        Ascending snapshot times in [0, 1], at least one.
    grid : Grid
    values : ndarray, shape (len(times),) + grid.shape + (dim,)
        Nodal control vectors per snapshot.

    Notes
    -----
    Queries interpolate linearly in time between snapshots (clamped to the
    end snapshots outside their range) and linearly/bilinearly in space.
    The component normal to each wall is forced to zero on all nodes within
    one grid cell of that wall, so the interpolated field keeps a vanishing
    normal component on a full cell-width collar.  This preserves, under
    interpolation, the zero normal flux that the exact control satisfies at
    the boundary.
    """

    def __init__(self, times, grid: Grid, values):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if times.ndim != 1 or times.size < 1:
            raise ConfigError("need at least one snapshot time")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("snapshot times must be strictly increasing")
        vals = np.asarray(values, dtype=float)
        want = (times.size,) + grid.shape + (grid.dim,)
        if vals.shape != want:
            raise DomainMismatchError(
                f"control values shape {vals.shape}, expected {want}")
        if not np.all(np.isfinite(vals)):
            raise NonPositiveError("control values must be finite")
        vals = vals.copy()
        # zero the normal component on the two nodes nearest each wall
        for ax in range(grid.dim):
            for rows in ((0, 1), (-1, -2)):
                for r in rows:
                    idx = [slice(None)] * (1 + grid.dim) + [ax]
                    idx[1 + ax] = r
                    vals[tuple(idx)] = 0.0
        vals.setflags(write=False)
        self.times = times
        self.grid = grid
        self.values = vals

    def _snapshot(self, t: float) -> np.ndarray:
        ts = self.times
        if ts.size == 1 or t <= ts[0]:
            return self.values[0]
        if t >= ts[-1]:
            return self.values[-1]
        i1 = int(np.searchsorted(ts, t, side="right"))
        i1 = min(max(i1, 1), ts.size - 1)
        i0 = i1 - 1
        lam = (t - ts[i0]) / (ts[i1] - ts[i0])
        return (1.0 - lam) * self.values[i0] + lam * self.values[i1]

    def at(self, t: float, points) -> np.ndarray:
        """Control vectors at time t and the given points.

        Parameters
        ----------
        t : float
        points : ndarray, shape (m, dim) or (m,) in 1D

        Returns
        -------
        ndarray matching the input convention: (m, dim), or (m,) in 1D when
        the query was one-dimensional.
        """
        pts = np.asarray(points, dtype=float)
        squeeze = self.grid.dim == 1 and pts.ndim == 1
        if squeeze:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] != self.grid.dim:
            raise DomainMismatchError(
                f"points shape {pts.shape} for a {self.grid.dim}-d field")
        if not np.all(self.grid.domain.contains(pts)):
            raise ControlOutOfRangeError("control queried outside the box")
        vals = self._snapshot(float(t))
        if self.grid.dim == 1:
            out = np.interp(pts[:, 0], self.grid.axes[0], vals[:, 0])[:, None]
        else:
            ax1, ax2 = self.grid.axes
            h1, h2 = self.grid.spacing
            i = np.clip(np.searchsorted(ax1, pts[:, 0]) - 1, 0, ax1.size - 2)
            j = np.clip(np.searchsorted(ax2, pts[:, 1]) - 1, 0, ax2.size - 2)
            fx = (pts[:, 0] - ax1[i]) / h1
            fy = (pts[:, 1] - ax2[j]) / h2
            out = ((1 - fx) * (1 - fy))[:, None] * vals[i, j] \
                + (fx * (1 - fy))[:, None] * vals[i + 1, j] \
                + ((1 - fx) * fy)[:, None] * vals[i, j + 1] \
                + (fx * fy)[:, None] * vals[i + 1, j + 1]
        return out[:, 0] if squeeze else out


class PathEnsemble:
    """Immutable record of reflected sample paths and their local times.

    Attributes
    ----------
    domain : BoxDomain
    times : ndarray, shape (n_steps + 1,)
    states : ndarray, shape (n_paths, n_steps + 1, dim)
        Every state lies in the closed box exactly.
    local_time_lower, local_time_upper : ndarray, same shape as states
        Cumulative local time per path and axis wall: nonnegative,
        nondecreasing, zero at time 0, increasing only at steps whose
        post-projection state sits on the corresponding wall.
    rng_seed : int
    """

    def __init__(self, domain: BoxDomain, times, states,
                 local_time_lower, local_time_upper, rng_seed: int):
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        ltl = np.asarray(local_time_lower, dtype=float)
        ltu = np.asarray(local_time_upper, dtype=float)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
            raise ConfigError("times must be strictly increasing, length >= 2")
        want = (states.shape[0], times.size, domain.dim)
        if states.shape != want:
            raise DomainMismatchError(
                f"states shape {states.shape}, expected {want}")
        if ltl.shape != want or ltu.shape != want:
            raise DomainMismatchError("local-time arrays must match states")
        lo = np.asarray(domain.lower)
        hi = np.asarray(domain.upper)
        if np.any(states < lo) or np.any(states > hi):
            raise OutOfDomainError("states must lie in the closed box")
        for lt, wall in ((ltl, lo), (ltu, hi)):
            if np.any(lt[:, 0, :] != 0.0):
                raise NonPositiveError("local time must start at zero")
            inc = np.diff(lt, axis=1)
            if np.any(inc < 0):
                raise NonPositiveError("local time must be nondecreasing")
            on_wall = states[:, 1:, :] == wall
            if np.any((inc > 0) & ~on_wall):
                raise NonPositiveError(
                    "local time increased away from the boundary")
        for arr in (times, states, ltl, ltu):
            arr.setflags(write=False)
        self.domain = domain
        self.times = times
        self.states = states
        self.local_time_lower = ltl
        self.local_time_upper = ltu
        self.rng_seed = int(rng_seed)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def dim(self) -> int:
        return self.domain.dim

    def states_at(self, t: float) -> np.ndarray:
        """States at the recorded step nearest to t, shape (n_paths, dim)."""
        if not 0.0 <= t <= self.times[-1]:
            raise ConfigError(f"t = {t} outside the recorded horizon")
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[:, k, :]


def _path_normals(seed_seq: np.random.SeedSequence, n_paths: int,
                  n_steps: int, dim: int) -> np.ndarray:
    """Standard normals (n_paths, n_steps, dim) from per-path substreams.

    Each path draws from its own counter-based substream, so path i is
    bit-identical for any ensemble size >= i + 1 and ensembles can be
    generated in independent chunks.
    """
    out = np.empty((n_paths, n_steps, dim))
    for i, child in enumerate(seed_seq.spawn(n_paths)):
        rng = np.random.Generator(np.random.Philox(child))
        out[i] = rng.standard_normal((n_steps, dim))
    return out


def simulate(n_paths: int, drift: DriftSpec, init_density: GridDensity,
             config: SolverConfig, seed: int,
             control: ControlField | None = None,
             theta: float | None = None) -> PathEnsemble:
    """Euler-Maruyama ensemble with coordinatewise boundary reflection.

    Parameters
    ----------
    n_paths : int
        Number of independent paths (zero gives an empty ensemble).
    drift : DriftSpec
        Prior drift f = -grad V.
    init_density : GridDensity
        Unit-mass density initial states are drawn from by inverse CDF.
    config : SolverConfig
        Supplies theta and the step count over [0, 1].
    seed : int
        Splits into one substream for the initial draw and one per path
        for the Gaussian increments; identical seeds give bit-identical
        ensembles.
    control : ControlField, optional
        Feedback control added to the drift (closed loop).
    theta : float, optional
        Temperature override; may be 0 to switch the noise off entirely,
        unlike SolverConfig.theta.

    Returns
    -------
    PathEnsemble
    """
    if n_paths < 0:
        raise ConfigError("n_paths must be nonnegative")
    theta = config.theta if theta is None else float(theta)
    if theta < 0:
        raise ConfigError("theta must be nonnegative")
    if abs(init_density.mass - 1.0) > 1e-8:
        raise ConfigError("init_density must have unit mass")
    domain = init_density.grid.domain
    if control is not None and control.grid.domain != domain:
        raise DomainMismatchError("control field lives on a different box")
    dim = domain.dim
    n_steps = config.time_steps
    dt = config.dt
    times = np.linspace(0.0, 1.0, n_steps + 1)
    lo = np.asarray(domain.lower)
    hi = np.asarray(domain.upper)

    root = np.random.SeedSequence(int(seed))
    init_seq, noise_seq = root.spawn(2)
    init_rng = np.random.Generator(np.random.Philox(init_seq))
    x0 = inverse_cdf_sample(init_density, n_paths, init_rng)
    if dim == 1:
        x0 = x0[:, None]
    normals = _path_normals(noise_seq, n_paths, n_steps, dim)
    sig = np.sqrt(2.0 * theta * dt)

    states = np.empty((n_paths, n_steps + 1, dim))
    ltl = np.zeros((n_paths, n_steps + 1, dim))
    ltu = np.zeros((n_paths, n_steps + 1, dim))
    states[:, 0, :] = x0
    for k in range(n_steps):
        x = states[:, k, :]
        step = drift.drift_at(x) * dt + sig * normals[:, k, :]
        if control is not None:
            step = step + control.at(times[k], x) * dt
        c = x + step
        ltl[:, k + 1, :] = ltl[:, k, :] + np.maximum(lo - c, 0.0)
        ltu[:, k + 1, :] = ltu[:, k, :] + np.maximum(c - hi, 0.0)
        states[:, k + 1, :] = np.clip(c, lo, hi)
    return PathEnsemble(domain, times, states, ltl, ltu, seed)


def empirical_marginal(ensemble: PathEnsemble, t: float,
                       grid: Grid) -> GridDensity:
    """Normalized histogram of the ensemble at the step nearest to t.

    Bins are the node-centred cells of the grid (cell i runs between the
    midpoints around node i, half cells at the walls), so the returned
    nodal density integrates to one under the grid's trapezoid weights.
    """
    if grid.domain != ensemble.domain:
        raise DomainMismatchError("grid box differs from the ensemble box")
    samples = ensemble.states_at(t)
    edges = []
    for ax in grid.axes:
        mids = 0.5 * (ax[:-1] + ax[1:])
        edges.append(np.concatenate(([ax[0]], mids, [ax[-1]])))
    if grid.dim == 1:
        counts, _ = np.histogram(samples[:, 0], bins=edges[0])
    else:
        counts, _, _ = np.histogram2d(samples[:, 0], samples[:, 1],
                                      bins=edges)
    return normalize(GridDensity(grid, counts / grid.weights))


def inverse_cdf_sample(density: GridDensity, n: int, seed) -> np.ndarray:
    """Draw n i.i.d. samples from a grid density by inverse CDF.

    Parameters
    ----------
    density : GridDensity
        Piecewise-linear density; in 2D the draw decomposes into the exact
        axis-1 marginal followed by the interpolated conditional on axis 2.
    n : int
        Sample count; n = 0 returns an empty array.
    seed : int or numpy.random.Generator

    Returns
    -------
    ndarray, shape (n,) in 1D or (n, 2) in 2D
    """
    if n < 0:
        raise ConfigError("sample count must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    grid = density.grid
    if grid.dim == 1:
        if n == 0:
            return np.empty(0)
        return inverse_cdf(density, rng.random(n))
    if n == 0:
        return np.empty((0, 2))
    ax1, ax2 = grid.axes
    h1, h2 = grid.spacing
    w2 = grid.axis_weights[1]
    marg_grid = Grid(BoxDomain([ax1[0]], [ax1[-1]]), ax1.size)
    marginal = GridDensity(marg_grid, density.values @ w2)
    x1 = inverse_cdf(marginal, rng.random(n))

    # conditional rows: linear interpolation of the nodal density in x1
    i = np.clip(np.searchsorted(ax1, x1) - 1, 0, ax1.size - 2)
    lam = np.clip((x1 - ax1[i]) / h1, 0.0, 1.0)
    rows = (1.0 - lam)[:, None] * density.values[i] \
        + lam[:, None] * density.values[i + 1]
    # per-row piecewise-quadratic CDF inversion, as in core.inverse_cdf
    cell = 0.5 * h2 * (rows[:, :-1] + rows[:, 1:])
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(cell, axis=1)], axis=1)
    total = cdf[:, -1]
    if np.any(total <= 0):
        raise NonPositiveError("conditional slice has zero mass")
    target = rng.random(n) * total
    j = np.clip(np.sum(cdf[:, :-1] <= target[:, None], axis=1) - 1,
                0, ax2.size - 2)
    r = np.arange(n)
    m = target - cdf[r, j]
    rl = rows[r, j]
    slope = (rows[r, j + 1] - rl) / h2
    s = np.empty(n)
    lin = np.abs(slope) * h2 < 1e-12 * np.maximum(rl, 1e-300)
    s[lin] = m[lin] / np.maximum(rl[lin], 1e-300)
    nl = ~lin
    disc = rl[nl] ** 2 + 2.0 * slope[nl] * m[nl]
    s[nl] = (np.sqrt(np.maximum(disc, 0.0)) - rl[nl]) / slope[nl]
    x2 = ax2[j] + np.clip(s, 0.0, h2)
    return np.column_stack([x1, x2])


def ks_statistic(samples, density: GridDensity) -> float:
    """One-sample Kolmogorov-Smirnov statistic against a 1D grid density."""
    if density.grid.dim != 1:
        raise DomainMismatchError("KS statistic needs a 1D density")
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ConfigError("need at least one sample")
    f = density_cdf(density, x)
    i = np.arange(1, x.size + 1)
    return float(max(np.max(i / x.size - f), np.max(f - (i - 1) / x.size)))


def write_ensemble_csv(ensemble: PathEnsemble, path,
                       config: dict | None = None) -> None:
    """Write an ensemble to CSV with a JSON sidecar.

    Columns are (path_id, step, t, x1[, x2], dL, dU); dL and dU are the
    per-step local-time increments, summed over axes in 2D.  Floats use
    shortest round-trip formatting.  The sidecar (same name, .json) carries
    the seed, step size, path count and the caller's config dict.  Both
    files are written via a temporary name and atomically renamed.
    """
    path = Path(path)
    n, t_count, dim = ensemble.states.shape
    cols = ["path_id", "step", "t"] + [f"x{j + 1}" for j in range(dim)] \
        + ["dL", "dU"]
    inc_l = np.zeros((n, t_count))
    inc_u = np.zeros((n, t_count))
    if t_count > 1:
        inc_l[:, 1:] = np.diff(ensemble.local_time_lower.sum(axis=2), axis=1)
        inc_u[:, 1:] = np.diff(ensemble.local_time_upper.sum(axis=2), axis=1)
    step_str = [str(k) for k in range(t_count)]
    t_str = [repr(v) for v in ensemble.times.tolist()]
    tmp = path.with_name(path.name + ".tmp")
    chunk = max(1, 200_000 // t_count)
    with open(tmp, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            lines = []
            for p in range(start, stop):
                pid = str(p)
                xs = [list(map(repr, ensemble.states[p, :, j].tolist()))
                      for j in range(dim)]
                dls = list(map(repr, inc_l[p].tolist()))
                dus = list(map(repr, inc_u[p].tolist()))
                for k in range(t_count):
                    row = [pid, step_str[k], t_str[k]]
                    row += [x[k] for x in xs]
                    row += [dls[k], dus[k]]
                    lines.append(",".join(row))
            fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)

    sidecar = path.with_suffix(".json")
    meta = {
        "n_paths": n,
        "n_steps": t_count - 1,
        "dt": ensemble.dt,
        "rng_seed": ensemble.rng_seed,
        "columns": cols,
        "config": config or {},
    }
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, sidecar)
