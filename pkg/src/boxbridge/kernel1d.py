"""Transition density of two-sided reflected Brownian motion on [a, b].

Two equivalent evaluations are provided.  The cosine eigenfunction series

    K(x, y, t) = 1/r + (2/r) sum_{m>=1} exp(-theta pi^2 m^2 t / r^2)
                 cos(m pi (x-a)/r) cos(m pi (y-a)/r),        r = b - a,

converges fast for moderate and large t.  The method-of-images Gaussian sum

    K(x, y, t) = (4 pi theta t)^{-1/2} sum_m [ e^{-(2mr - X - Y)^2/(4 theta t)}
                                             + e^{-(2mr - X + Y)^2/(4 theta t)} ]

with X = x - a, Y = y - a converges fast for small t; Poisson summation
identifies the two.  The images form is manifestly positive and serves as
the independent oracle for the series.
"""

from __future__ import annotations

import numpy as np

from .core import (
    BoxDomain,
    ConfigError,
    DivergedError,
    DomainMismatchError,
    Grid,
    OutOfDomainError,
)

__all__ = ["ReflectedHeatKernel"]

# largest truncation the series path will accept before the caller is told
# to use the image sum instead
MAX_SERIES_TERMS = 10**6


class ReflectedHeatKernel:
    """Markov kernel of the reflecting heat semigroup on an interval.

    Parameters
    ----------
    interval : BoxDomain
        One-dimensional box [a, b].
    theta : float
        Diffusion temperature; the generator is theta * d^2/dx^2.
    series_terms : int
        Default cosine-series truncation.
    """

    def __init__(self, interval: BoxDomain, theta: float, series_terms: int = 100):
        if interval.dim != 1:
            raise ConfigError("kernel interval must be one-dimensional")
        if not theta > 0:
            raise ConfigError("theta must be positive")
        if series_terms < 1:
            raise ConfigError("series_terms must be at least 1")
        self.interval = interval
        self.theta = float(theta)
        self.series_terms = int(series_terms)

    @property
    def a(self) -> float:
        return self.interval.lower[0]

    @property
    def b(self) -> float:
        return self.interval.upper[0]

    @property
    def width(self) -> float:
        return self.b - self.a

    def _check_points(self, *points):
        for p in points:
            arr = np.asarray(p, dtype=float)
            if np.any(arr < self.a) or np.any(arr > self.b):
                raise OutOfDomainError(
                    f"point outside [{self.a}, {self.b}]")

    def _rates(self, terms: int) -> np.ndarray:
        m = np.arange(1, terms + 1)
        return self.theta * (np.pi * m / self.width) ** 2

    def eval_cosine(self, x, y, t: float, terms: int | None = None):
        """Cosine-series evaluation, truncated after `terms` modes.

        Broadcasts over x and y.  Values can dip a few ulps below zero where
        the true kernel is smaller than the truncation error; see
        eval_images for the positivity-faithful oracle.
        """
        if not t > 0:
            raise ConfigError("t must be positive")
        self._check_points(x, y)
        M = self.series_terms if terms is None else int(terms)
        r = self.width
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        m = np.arange(1, M + 1)
        decay = np.exp(-self._rates(M) * t)
        cx = np.cos(np.multiply.outer(x - self.a, m) * (np.pi / r))
        cy = np.cos(np.multiply.outer(y - self.a, m) * (np.pi / r))
        out = 1.0 / r + (2.0 / r) * np.einsum("...m,m,...m->...", cx, decay, cy)
        return out if out.shape else float(out)

    def eval_images(self, x, y, t: float, n_images: int = 50):
        """Method-of-images evaluation with reflections m = -n_images..n_images.

        Strictly positive: every term is a Gaussian.
        """
        if not t > 0:
            raise ConfigError("t must be positive")
        self._check_points(x, y)
        r = self.width
        X = np.asarray(x, dtype=float) - self.a
        Y = np.asarray(y, dtype=float) - self.a
        m = np.arange(-int(n_images), int(n_images) + 1)
        four_tt = 4.0 * self.theta * t
        shift = 2.0 * r * m
        s1 = np.exp(-(np.subtract.outer(-X - Y, -shift)) ** 2 / four_tt)
        s2 = np.exp(-(np.subtract.outer(Y - X, -shift)) ** 2 / four_tt)
        out = (s1 + s2).sum(axis=-1) / np.sqrt(np.pi * four_tt)
        return out if out.shape else float(out)

    def required_terms(self, t: float, tol: float) -> int:
        """Smallest truncation M whose tail bound falls below tol.

        The omitted tail sum_{m>M} exp(-c m^2), c = theta pi^2 t / r^2, is
        bounded by its first term times a geometric majorant,

            tail(M) <= exp(-c (M+1)^2) / (1 - exp(-c (2M+3))),

        and the kernel truncation error is 2/r times that.

        Raises
        ------
        DivergedError
            If more than 10^6 terms would be needed (caller should switch
            to eval_images).
        """
        if not tol > 0:
            raise ConfigError("tol must be positive")
        if not t > 0:
            raise ConfigError("t must be positive")
        c = self.theta * (np.pi / self.width) ** 2 * t

        def bound(M: int) -> float:
            den = -np.expm1(-c * (2 * M + 3))
            return (2.0 / self.width) * np.exp(-c * (M + 1) ** 2) / den

        # the bound is strictly decreasing in M, so bisect on the cap
        if bound(MAX_SERIES_TERMS) >= tol:
            raise DivergedError(
                f"more than {MAX_SERIES_TERMS} series terms needed at t={t}")
        lo, hi = 1, MAX_SERIES_TERMS
        if bound(lo) < tol:
            return lo
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if bound(mid) < tol:
                hi = mid
            else:
                lo = mid
        return hi

    def kernel_matrix(self, grid: Grid, t: float, terms: int | None = None) -> np.ndarray:
        """Quadrature-weighted kernel matrix A[i, j] = K(x_i, x_j, t) w_j.

        A maps nodal values of g to nodal values of integral K(x, y, t) g(y) dy.
        Uses the cosine series at the configured truncation; falls back to
        the image sum when the series would need more than 10^6 terms to
        reach 1e-10.
        """
        if grid.dim != 1 or not grid.domain == self.interval:
            raise DomainMismatchError("grid must cover the kernel interval")
        xs = grid.axes[0]
        w = grid.axis_weights[0]
        try:
            self.required_terms(t, 1e-10)
            K = self.eval_cosine(xs[:, None], xs[None, :], t, terms=terms)
        except DivergedError:
            K = self.eval_images(xs[:, None], xs[None, :], t)
        return K * w[None, :]

    def apply(self, grid: Grid, values: np.ndarray, t: float,
              terms: int | None = None) -> np.ndarray:
        """Evaluate integral K(., y, t) v(y) dy without forming the matrix.

        Expands v in the cosine eigenbasis under trapezoid quadrature:
        cost O(n * terms) per call, used for dense-in-time snapshot
        reconstruction.
        """
        if grid.dim != 1 or not grid.domain == self.interval:
            raise DomainMismatchError("grid must cover the kernel interval")
        if not t > 0:
            raise ConfigError("t must be positive")
        M = self.series_terms if terms is None else int(terms)
        xs = grid.axes[0]
        w = grid.axis_weights[0]
        v = np.asarray(values, dtype=float)
        r = self.width
        m = np.arange(1, M + 1)
        cx = np.cos(np.outer(xs - self.a, m) * (np.pi / r))
        coef = cx.T @ (w * v)
        decay = np.exp(-self._rates(M) * t)
        return np.full(xs.size, (w * v).sum() / r) + (2.0 / r) * (cx * decay) @ coef
