"""Monotone piecewise-cubic Hermite interpolation.

Node slopes come from the three-point parabola (exact for quadratic data)
and are then limited with Hyman's filter, ``0 <= m / d <= 3`` against both
adjacent secants, which is sufficient for monotonicity on each interval.
Unlike PCHIP's harmonic-mean slopes this reproduces quadratics whenever the
filter is inactive, so cumulative sums of linearly ramped angles are
interpolated exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicHermiteSpline


def _parabolic_slopes(x, y):
    h = np.diff(x)
    d = np.diff(y) / h
    n = x.size
    m = np.empty(n)
    if n == 2:
        m[:] = d[0]
        return m, d
    m[1:-1] = (h[1:] * d[:-1] + h[:-1] * d[1:]) / (h[:-1] + h[1:])
    m[0] = d[0] - h[0] * (d[1] - d[0]) / (h[0] + h[1])
    m[-1] = d[-1] + h[-1] * (d[-1] - d[-2]) / (h[-2] + h[-1])
    return m, d


def _hyman_filter(m, d):
    m = m.copy()
    n = m.size
    for k in range(n):
        left = d[k - 1] if k > 0 else None
        right = d[k] if k < n - 1 else None
        adj = [s for s in (left, right) if s is not None]
        if any(s == 0 for s in adj) or (len(adj) == 2 and np.sign(adj[0]) != np.sign(adj[1])):
            m[k] = 0.0
            continue
        sgn = np.sign(adj[0])
        if np.sign(m[k]) != sgn:
            m[k] = 0.0
            continue
        cap = 3.0 * min(abs(s) for s in adj)
        if abs(m[k]) > cap:
            m[k] = sgn * cap
    return m


class MonotoneCubic:
    """Callable interpolant with ``derivative`` support; evaluation outside the nodes raises."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ValueError("need matching 1-D node arrays with at least two points")
        if np.any(np.diff(x) <= 0):
            raise ValueError("nodes must be strictly increasing")
        m, d = _parabolic_slopes(x, y)
        self.x = x
        self.y = y
        self.m = _hyman_filter(m, d)
        self._spline = CubicHermiteSpline(x, y, self.m)
        self._slope = self._spline.derivative()

    def _clip(self, u):
        u = np.asarray(u, dtype=np.float64)
        lo, hi = self.x[0], self.x[-1]
        tol = 1e-12 * max(1.0, abs(hi - lo))
        if np.any(u < lo - tol) or np.any(u > hi + tol):
            raise ValueError("evaluation point outside the interpolation range")
        return np.clip(u, lo, hi)

    def __call__(self, u):
        return self._spline(self._clip(u))

    def derivative(self, u):
        return self._slope(self._clip(u))


class PiecewiseLinear:
    """Linear interpolant with the same interface; slopes are piecewise constant."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("need strictly increasing 1-D nodes")
        self.x = x
        self.y = y
        self.slopes = np.diff(y) / np.diff(x)

    def __call__(self, u):
        return np.interp(u, self.x, self.y)

    def derivative(self, u):
        u = np.asarray(u, dtype=np.float64)
        k = np.clip(np.searchsorted(self.x, u, side="right") - 1, 0, self.x.size - 2)
        return self.slopes[k]
