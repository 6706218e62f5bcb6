"""Explicit monotone finite differences for the one-dimensional G-heat equation.

Backward in time, ``u(t - dt) = u(t) + dt G(D2 u(t))`` with the centered
second difference ``D2``.  Under ``dt <= dx^2 / sigma_upper^2`` each update is a
nondecreasing function of every stencil value, so the scheme satisfies a
discrete comparison principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from gcalc.gcore import VolatilityBand

BOUNDARIES = ("extrapolate_linear", "clamp_terminal")


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    nx: int
    dt: float
    boundary: str = "extrapolate_linear"

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError("nx must be >= 3")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def max_dt(self, band: VolatilityBand) -> float:
        """Largest step keeping the scheme monotone."""
        return float(self.dx ** 2 / band.upper_sq[0, 0])

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "nx": self.nx, "dt": self.dt,
                "dx": self.dx, "boundary": self.boundary}


def auto_grid(band: VolatilityBand, T: float, x_center: float = 0.0, nx: int = 801,
              width: float = 6.0, boundary: str = "extrapolate_linear") -> Grid1D:
    """Domain ``x_center +- width sigma_upper sqrt(T)`` at the largest stable step."""
    half = width * math.sqrt(band.upper_sq[0, 0] * T)
    g = Grid1D(x_center - half, x_center + half, nx, 1.0, boundary)
    return Grid1D(g.x_min, g.x_max, nx, g.max_dt(band), boundary)


@dataclass(frozen=True, eq=False)
class ValueSurface:
    grid: Grid1D
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-2:] != (self.times.size, self.grid.nx):
            raise ValueError("surface shape does not match grid and times")

    def at(self, t: float, x) -> np.ndarray:
        """Monotone cubic interpolation in ``x`` at a stored time level."""
        k = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if k.size == 0:
            raise ValueError(f"time {t} not stored")
        return interpolate(self.grid, self.values[..., k[0], :], x)

    def rows(self):
        xs = self.grid.x
        rows = [[float(t), float(x), float(u)] for t, row in zip(self.times, self.values) for x, u in zip(xs, row)]
        return ["t", "x", "u"], rows


def interpolate(grid: Grid1D, values: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any((x < grid.x_min) | (x > grid.x_max)):
        raise ValueError("query outside the spatial grid")
    return PchipInterpolator(grid.x, values, axis=-1)(x)


def _terminal_values(phi, x: np.ndarray) -> np.ndarray:
    if callable(phi):
        vals = phi(x)
    else:
        vals = phi
    return np.array(np.broadcast_to(np.asarray(vals, dtype=float), np.broadcast_shapes(np.shape(vals), x.shape)))


def solve_terminal(phi, band: VolatilityBand, grid: Grid1D, T: float, save_every: int | None = 1) -> ValueSurface:
    """Backward solve from ``u(T) = phi`` to ``t = 0``.

    ``phi`` is a function of ``x`` or an array of terminal values whose last
    axis runs over the grid; leading axes are solved independently.  Every
    ``save_every``-th level is stored (``None`` keeps only ``t = 0`` and
    ``t = T``).  The step is shrunk to ``T / ceil(T / grid.dt)``.
    """
    lo, up = band.scalar()
    if not T > 0:
        raise ValueError("horizon must be positive")
    max_dt = grid.max_dt(band)
    if grid.dt > max_dt * (1 + 1e-12):
        raise SolverError(f"CFL violated: dt={grid.dt!r} exceeds the maximal admissible dt={max_dt!r}")
    n_steps = math.ceil(T / grid.dt - 1e-12)
    dt = T / n_steps
    u = _terminal_values(phi, grid.x)
    if not np.all(np.isfinite(u)):
        raise SolverError("blow-up: terminal data not finite")
    # dt G(D2 u) = c_lo D2 + (c_up - c_lo) max(D2, 0) with D2 unscaled
    c_lo = 0.5 * dt * lo * lo / grid.dx ** 2
    c_jump = 0.5 * dt * up * up / grid.dx ** 2 - c_lo
    saved_t, saved_u = [T], [u.copy()]
    inner = u[..., 1:-1]
    d2 = np.empty_like(inner)
    pos = np.empty_like(inner)
    for k in range(1, n_steps + 1):
        # boundary nodes keep D2 = 0 and never move
        np.add(u[..., 2:], u[..., :-2], out=d2)
        d2 -= inner
        d2 -= inner
        np.maximum(d2, 0.0, out=pos)
        pos *= c_jump
        d2 *= c_lo
        d2 += pos
        inner += d2
        if k == n_steps or (save_every and k % save_every == 0):
            if not np.all(np.isfinite(u)):
                raise SolverError(f"blow-up at step {k}")
            saved_t.append(T - k * dt if k < n_steps else 0.0)
            saved_u.append(u.copy())
    times = np.array(saved_t[::-1])
    values = np.stack(saved_u[::-1], axis=-2)
    return ValueSurface(grid, times, values)


def g_expectation(phi, band: VolatilityBand, grid: Grid1D, T: float, x0: float = 0.0) -> float:
    """Upper expectation of ``phi(x0 + B_T)``."""
    surf = solve_terminal(phi, band, grid, T, save_every=None)
    return float(interpolate(grid, surf.values[..., 0, :], x0))


@dataclass(frozen=True, eq=False)
class CylinderFunctional:
    """``phi(B_{t_1}, ..., B_{t_n})`` with ``phi`` taking ``n`` array arguments."""

    times: tuple
    phi: Callable
    lip_bound: float = math.inf

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if not ts:
            raise ValueError("need at least one time")
        if ts[0] <= 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("times must satisfy 0 < t_1 < ... < t_n")
        object.__setattr__(self, "times", ts)

    @property
    def n(self) -> int:
        return len(self.times)

    def check_lipschitz(self, rng: np.random.Generator, n_pairs: int = 200, scale: float = 5.0) -> None:
        if not math.isfinite(self.lip_bound):
            return
        a = rng.uniform(-scale, scale, (self.n, n_pairs))
        b = rng.uniform(-scale, scale, (self.n, n_pairs))
        gap = np.abs(np.asarray(self.phi(*a)) - np.asarray(self.phi(*b)))
        if np.any(gap > self.lip_bound * np.linalg.norm(a - b, axis=0) + 1e-12):
            raise ValueError("phi violates its Lipschitz bound")


def conditional_g_expectation(xi: CylinderFunctional, band: VolatilityBand, grid: Grid1D,
                              t: float = 0.0, x: float = 0.0, observed: Sequence[float] = ()) -> float:
    """Conditional upper expectation at time ``t`` given ``B_t = x``.

    ``observed`` holds the already fixed values ``B_{t_i}`` for ``t_i <= t``.
    Two-level functionals chain an inner solve for every grid value of
    ``x_1`` into the terminal data of the outer solve.
    """
    if xi.n > 2:
        raise ValueError("unsupported nesting depth")
    n_obs = sum(1 for ti in xi.times if ti <= t)
    if len(observed) < n_obs:
        raise ValueError(f"query at t={t} needs {n_obs} observed values")
    obs = [float(v) for v in observed[:n_obs]]
    if n_obs == xi.n:
        return float(xi.phi(*obs))
    if xi.n == 1:
        return _value_at(lambda y: xi.phi(y), band, grid, xi.times[0] - t, x)
    t1, t2 = xi.times
    if n_obs == 1:
        return _value_at(lambda y: xi.phi(obs[0], y), band, grid, t2 - t, x)
    psi = cylinder_terminal(xi, band, grid)
    if t == t1:
        return float(interpolate(grid, psi, x))
    return _value_at(psi, band, grid, t1 - t, x)


def cylinder_terminal(xi: CylinderFunctional, band: VolatilityBand, grid: Grid1D) -> np.ndarray:
    """Grid values at ``t_1`` of the conditional upper expectation of ``xi``.

    Solving these backward from ``t_1`` gives the value for ``t < t_1``.
    """
    xs = grid.x
    if xi.n == 1:
        return _terminal_values(xi.phi, xs)
    if xi.n > 2:
        raise ValueError("unsupported nesting depth")
    t1, t2 = xi.times
    inner = solve_terminal(xi.phi(xs[:, None], xs[None, :]), band, grid, t2 - t1, save_every=None)
    return np.diagonal(inner.values[:, 0, :]).copy()


def _value_at(phi, band: VolatilityBand, grid: Grid1D, horizon: float, x: float) -> float:
    if horizon <= 0:
        vals = _terminal_values(phi, grid.x)
        return float(interpolate(grid, vals, x))
    return g_expectation(phi, band, grid, horizon, x)
