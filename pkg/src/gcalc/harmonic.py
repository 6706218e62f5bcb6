"""Harmonic profiles and the explicit path-independent example they generate.

For time-independent ``h`` and ``sigma`` the operator
``L = h d/dx + 1/2 sigma^2 d^2/dx^2`` has the harmonic functions

    V0(x) = V0(0) + V0'(0) int_0^x exp(-2 int_0^u h/sigma^2 dr) du.

With ``V(t, x) = phi(t) V0(x)``, ``alpha = 0`` and ``beta = 2`` the
functional with ``f = 1/2 G^{-1}(phi' V0 + b phi V0')`` and
``g = sigma phi V0'`` is path independent with potential ``V``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicHermiteSpline

from gcalc.functional import FunctionalSpec
from gcalc.gcore import VolatilityBand, eval_g_inverse_1d
from gcalc.pathcheck import ValueFunction
from gcalc.scenario import CoefficientSet

SIGMA_FLOOR = 1e-8


def _evaluate(fn, x: np.ndarray) -> np.ndarray:
    val = fn(x) if callable(fn) else fn
    return np.broadcast_to(np.asarray(val, dtype=float), x.shape).copy()


def _cumulative_from_zero(y: np.ndarray, x: np.ndarray, i0: int) -> np.ndarray:
    """Composite Simpson integral of ``y`` from ``x[i0] = 0`` to every node."""
    out = np.zeros_like(x)
    if i0 < x.size - 1:
        out[i0 + 1:] = cumulative_simpson(y[i0:], x=x[i0:])
    if i0 > 0:
        out[:i0] = -cumulative_simpson(y[i0::-1], x=-x[i0::-1])[::-1]
    return out


@dataclass(frozen=True, eq=False)
class HarmonicProfile:
    x_grid: np.ndarray
    V0: np.ndarray
    V0_prime: np.ndarray
    V0_at_0: float
    V0prime_at_0: float
    h: Callable
    sigma: Callable

    def __post_init__(self):
        for name in ("x_grid", "V0", "V0_prime"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "_v0_spline", CubicHermiteSpline(self.x_grid, self.V0, self.V0_prime))
        object.__setattr__(self, "_v1_spline", CubicHermiteSpline(
            self.x_grid, self.V0_prime, self._second(self.x_grid, self.V0_prime)))

    def _second(self, x: np.ndarray, v1: np.ndarray) -> np.ndarray:
        s = _evaluate(self.sigma, x)
        return -2.0 * _evaluate(self.h, x) * v1 / (s * s)

    def _check_range(self, x: np.ndarray) -> None:
        lo, hi = self.x_grid[0], self.x_grid[-1]
        bad = (x < lo) | (x > hi) | np.isnan(x)
        if np.any(bad):
            raise ValueError(f"x={float(x[bad].flat[0])!r} outside the profile grid [{lo}, {hi}]")

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_range(x)
        return self._v0_spline(x)

    def derivative(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_range(x)
        return self._v1_spline(x)

    def second_derivative(self, x) -> np.ndarray:
        """From the harmonic relation ``V0'' = -2 h V0' / sigma^2``."""
        x = np.asarray(x, dtype=float)
        return self._second(x, self.derivative(x))

    def rows(self):
        return ["x", "V0", "V0_prime"], np.column_stack([self.x_grid, self.V0, self.V0_prime]).tolist()


def build_v0(h, sigma, x_grid, V0_at_0: float = 0.0, V0prime_at_0: float = 1.0) -> HarmonicProfile:
    """Tabulate the harmonic function through ``(0, V0(0))`` with slope ``V0'(0)``.

    ``h`` and ``sigma`` are functions of ``x`` (or constants).
    """
    x = np.asarray(x_grid, dtype=float)
    if x.ndim != 1 or x.size < 3 or np.any(np.diff(x) <= 0):
        raise ValueError("x_grid must be strictly increasing with at least 3 nodes")
    zero = np.flatnonzero(x == 0.0)
    if zero.size != 1:
        raise ValueError("x_grid must contain 0")
    i0 = int(zero[0])
    s = _evaluate(sigma, x)
    small = np.flatnonzero(~(np.abs(s) >= SIGMA_FLOOR))
    if small.size:
        raise ValueError(f"sigma vanishes at x={float(x[small[0]])!r}")
    inner = _cumulative_from_zero(_evaluate(h, x) / (s * s), x, i0)
    weight = np.exp(-2.0 * inner)
    V0 = V0_at_0 + V0prime_at_0 * _cumulative_from_zero(weight, x, i0)
    V1 = V0prime_at_0 * weight
    return HarmonicProfile(x, V0, V1, float(V0_at_0), float(V0prime_at_0), h, sigma)


def check_harmonic(profile: HarmonicProfile, h, sigma) -> float:
    """Sup over interior nodes of ``|h V0' + 1/2 sigma^2 V0''|`` with ``V0''``
    from centered differences of the stored ``V0'``."""
    x = profile.x_grid
    dx = np.diff(x)
    if not np.allclose(dx, dx[0], rtol=1e-9, atol=0):
        raise ValueError("grid spacing must be uniform")
    v1 = profile.V0_prime
    v2 = (v1[2:] - v1[:-2]) / (2 * dx[0])
    xi = x[1:-1]
    s = _evaluate(sigma, xi)
    return float(np.max(np.abs(_evaluate(h, xi) * v1[1:-1] + 0.5 * s * s * v2)))


@dataclass(frozen=True, eq=False)
class ExampleSetup:
    spec: FunctionalSpec
    V: ValueFunction
    coeffs: CoefficientSet
    profile: HarmonicProfile


def build_example_spec(profile: HarmonicProfile, phi: Callable, phi_prime: Callable, b,
                       band: VolatilityBand) -> ExampleSetup:
    """Path-independent ``(spec, V)`` from a profile.

    ``phi`` and ``phi_prime`` are functions of ``t``; ``b`` is a function of
    ``(t, x)`` or a constant.  The returned coefficients use the profile's
    ``h`` and ``sigma``.
    """
    band.scalar()

    def bval(t, x):
        return np.broadcast_to(np.asarray(b(t, x) if callable(b) else b, dtype=float), np.shape(x))

    def phi_at(fn, t, shape):
        return np.broadcast_to(np.asarray(fn(t), dtype=float), shape)

    def f(t, x):
        z = phi_at(phi_prime, t, x.shape) * profile.value(x) + bval(t, x) * phi_at(phi, t, x.shape) * profile.derivative(x)
        return 0.5 * eval_g_inverse_1d(z, band)

    def g(t, x):
        return _evaluate(profile.sigma, x) * phi_at(phi, t, x.shape) * profile.derivative(x)

    V = ValueFunction.scalar(
        lambda t, x: phi_at(phi, t, x.shape) * profile.value(x),
        lambda t, x: phi_at(phi_prime, t, x.shape) * profile.value(x),
        lambda t, x: phi_at(phi, t, x.shape) * profile.derivative(x),
        lambda t, x: phi_at(phi, t, x.shape) * profile.second_derivative(x),
    )
    coeffs = CoefficientSet.scalar(
        bval, lambda t, x: _evaluate(profile.h, x), lambda t, x: _evaluate(profile.sigma, x))
    return ExampleSetup(FunctionalSpec.scalar(0.0, 2.0, f, g), V, coeffs, profile)
