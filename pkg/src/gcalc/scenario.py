"""Scenario ensembles for G-Brownian motion and G-SDEs.

A scenario fixes one admissible volatility path ``gamma_t`` in the band;
under it ``B`` is a classical martingale with ``dB = gamma xi sqrt(dt)``
and quadratic variation ``d<B> = gamma^2 dt``.  Upper expectations are
estimated as the maximum of Monte Carlo means over a finite family of
such scenarios, which can only under-estimate the true supremum.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from gcalc import streams
from gcalc.gcore import BandError, VolatilityBand, _as_matrix, random_gamma, symmetrize


class SimulationError(RuntimeError):
    """Raised when a trajectory leaves the floating point range."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)


# --- control policies -------------------------------------------------------

@dataclass(frozen=True)
class ConstantRandom:
    """One feasible volatility drawn at random and held for the whole path."""


@dataclass(frozen=True)
class PiecewiseRandom:
    """A fresh random feasible volatility on every step."""


@dataclass(frozen=True)
class BangBang:
    """``+`` selects ``sigma_upper``, ``-`` selects ``sigma_lower``.

    The schedule is repeated cyclically when shorter than the grid.
    """

    signs: tuple

    def __post_init__(self):
        parsed = tuple(_parse_sign(s) for s in self.signs)
        if not parsed:
            raise ValueError("empty sign schedule")
        object.__setattr__(self, "signs", parsed)


@dataclass(frozen=True, eq=False)
class Fixed:
    gamma: object


@dataclass(frozen=True, eq=False)
class Feedback:
    """State-feedback control decided at each step from the current ``B``.

    ``rule(t, B)`` receives ``B`` with shape ``(S, d)`` and returns weights
    ``u`` in ``[0, 1]`` of shape ``(S,)``; the volatility is
    ``sigma_lower + u (sigma_upper - sigma_lower)``.
    """

    rule: Callable[[float, np.ndarray], np.ndarray]
    name: str = "feedback"


def _parse_sign(s) -> int:
    if s in ("+", 1, 1.0, True):
        return 1
    if s in ("-", "−", -1, -1.0, False):
        return -1
    raise ValueError(f"bad sign {s!r}; use '+' or '-'")


POLICY_NAMES = ("constant_random", "piecewise_random", "bang_bang", "fixed")


def _resolve_policy(policy):
    if isinstance(policy, str):
        if policy == "constant_random":
            return ConstantRandom()
        if policy == "piecewise_random":
            return PiecewiseRandom()
        raise ValueError(f"policy {policy!r} needs parameters or is unknown")
    return policy


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Per-step volatility matrices, each inside the band."""

    grid: TimeGrid
    gammas: np.ndarray
    band: VolatilityBand = field(repr=False)

    def __post_init__(self):
        g = symmetrize(np.asarray(self.gammas, dtype=float))
        d = self.band.dim
        if g.shape != (self.grid.n_steps, d, d):
            raise BandError(f"gammas shape {g.shape} != {(self.grid.n_steps, d, d)}")
        _check_in_band(g, self.band)
        g.setflags(write=False)
        object.__setattr__(self, "gammas", g)


def _check_in_band(g: np.ndarray, band: VolatilityBand, tol: float = 1e-10) -> None:
    lo = np.linalg.eigvalsh(symmetrize(g - band.sigma_lower))[..., 0]
    hi = np.linalg.eigvalsh(symmetrize(band.sigma_upper - g))[..., 0]
    bad = np.flatnonzero((lo < -tol) | (hi < -tol))
    if bad.size:
        raise BandError(f"volatility at step {int(bad[0])} lies outside the band")


def sample_control(band: VolatilityBand, grid: TimeGrid, policy, rng_seed: int = 0) -> ControlPath:
    """Build a deterministic-in-time control path for ``policy``."""
    policy = _resolve_policy(policy)
    n, d = grid.n_steps, band.dim
    rng = np.random.default_rng(rng_seed)
    if isinstance(policy, Fixed):
        gamma = symmetrize(_as_matrix(policy.gamma, d))
        if gamma.shape != (d, d) or not band.contains(gamma):
            raise BandError("fixed volatility lies outside the band")
        gammas = np.broadcast_to(gamma, (n, d, d))
    elif isinstance(policy, ConstantRandom):
        gammas = np.broadcast_to(random_gamma(band, rng), (n, d, d))
    elif isinstance(policy, PiecewiseRandom):
        gammas = np.stack([random_gamma(band, rng) for _ in range(n)])
    elif isinstance(policy, BangBang):
        signs = np.resize(np.array(policy.signs), n)
        gammas = np.where(signs[:, None, None] > 0, band.sigma_upper, band.sigma_lower)
    elif isinstance(policy, Feedback):
        raise TypeError("feedback controls are realised during simulation")
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return ControlPath(grid, np.array(gammas), band)


# --- paths ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScenarioPath:
    grid: TimeGrid
    control: ControlPath
    dB: np.ndarray
    qv_increments: np.ndarray
    B: np.ndarray
    QV: np.ndarray
    X: np.ndarray | None = None
    seed: int = 0
    index: int = 0

    @property
    def dim(self) -> int:
        return self.dB.shape[-1]

    def with_x(self, X: np.ndarray) -> "ScenarioPath":
        return replace(self, X=X)


@dataclass(frozen=True, eq=False)
class ScenarioEnsemble:
    """Stack of scenarios on one grid; arrays carry a leading scenario axis."""

    grid: TimeGrid
    controls: tuple
    dB: np.ndarray
    qv_increments: np.ndarray
    B: np.ndarray
    QV: np.ndarray
    X: np.ndarray | None = None
    seed: int = 0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.dB.shape[0]

    @property
    def dim(self) -> int:
        return self.dB.shape[-1]

    def path(self, i: int) -> ScenarioPath:
        return ScenarioPath(
            self.grid, self.controls[i], self.dB[i], self.qv_increments[i], self.B[i],
            self.QV[i], None if self.X is None else self.X[i], self.seed, int(self.indices[i]),
        )

    def paths(self) -> list[ScenarioPath]:
        return [self.path(i) for i in range(len(self))]

    def with_x(self, X: np.ndarray) -> "ScenarioEnsemble":
        return replace(self, X=X)

    def window(self, k0: int, k1: int) -> "ScenarioEnsemble":
        """Sub-ensemble on nodes ``k0..k1`` with ``B`` and ``QV`` restarted at 0."""
        if not 0 <= k0 < k1 <= self.grid.n_steps:
            raise ValueError("bad window")
        times = self.grid.times
        grid = TimeGrid(float(times[k0]), float(times[k1]), k1 - k0)
        return ScenarioEnsemble(
            grid, tuple(ControlPath(grid, c.gammas[k0:k1], c.band) for c in self.controls),
            self.dB[:, k0:k1], self.qv_increments[:, k0:k1],
            self.B[:, k0:k1 + 1] - self.B[:, k0:k0 + 1], self.QV[:, k0:k1 + 1] - self.QV[:, k0:k0 + 1],
            None if self.X is None else self.X[:, k0:k1 + 1], self.seed, self.indices,
        )

    @classmethod
    def from_paths(cls, paths: Sequence[ScenarioPath]) -> "ScenarioEnsemble":
        grid = paths[0].grid
        if any(p.grid != grid for p in paths):
            raise ValueError("paths live on different grids")
        has_x = all(p.X is not None for p in paths)
        return cls(
            grid, tuple(p.control for p in paths),
            np.stack([p.dB for p in paths]), np.stack([p.qv_increments for p in paths]),
            np.stack([p.B for p in paths]), np.stack([p.QV for p in paths]),
            np.stack([p.X for p in paths]) if has_x else None,
            paths[0].seed, np.array([p.index for p in paths], dtype=np.int64),
        )


def _as_ensemble(path):
    if isinstance(path, ScenarioPath):
        return ScenarioEnsemble.from_paths([path]), True
    return path, False


def simulate_batch(controls: Sequence, band: VolatilityBand, grid: TimeGrid, rng_seed: int,
                   indices, hold: int = 1) -> ScenarioEnsemble:
    """Simulate one scenario per control.

    ``controls`` holds :class:`ControlPath` objects on ``grid`` or
    :class:`Feedback` rules.  The returned paths live on ``grid`` refined by
    ``hold``: each control decision is held for ``hold`` fine steps, and the
    normal for fine step ``k`` of scenario ``i`` is keyed by
    ``(rng_seed, indices[i], k)``.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(controls) != indices.size:
        raise ValueError("one index per control is required")
    d = band.dim
    fine = grid.refine(hold)
    n, S = fine.n_steps, indices.size
    dt = fine.dt
    xi = streams.normals(rng_seed, indices, n, d)

    static = np.array([not isinstance(c, Feedback) for c in controls])
    gam = np.empty((S, grid.n_steps, d, d))
    for i, c in enumerate(controls):
        if isinstance(c, ControlPath):
            if c.grid != grid:
                raise ValueError("control lives on a different grid")
            gam[i] = c.gammas
        elif not isinstance(c, Feedback):
            raise TypeError(f"unsupported control {c!r}")
    groups: dict[int, list[int]] = {}
    for i in np.flatnonzero(~static):
        groups.setdefault(id(controls[i]), []).append(int(i))

    dB = np.empty((S, n, d))
    B = np.zeros((S, n + 1, d))
    times = grid.times
    sqdt = np.sqrt(dt)
    for kc in range(grid.n_steps):
        for members in groups.values():
            rule = controls[members[0]].rule
            u = np.asarray(rule(times[kc], B[members, kc * hold]), dtype=float)
            u = np.clip(np.broadcast_to(u, (len(members),)), 0.0, 1.0)
            gam[members, kc] = band.sigma_lower + u[:, None, None] * band.width
        g = gam[:, kc]
        for j in range(kc * hold, (kc + 1) * hold):
            dB[:, j] = np.einsum("sij,sj->si", g, xi[:, j]) * sqdt
            B[:, j + 1] = B[:, j] + dB[:, j]

    gam_fine = np.repeat(gam, hold, axis=1)
    qv = (gam_fine @ gam_fine) * dt
    QV = np.concatenate([np.zeros((S, 1, d, d)), np.cumsum(qv, axis=1)], axis=1)
    realised = tuple(
        c if isinstance(c, ControlPath) and hold == 1 else ControlPath(fine, gam_fine[i], band)
        for i, c in enumerate(controls)
    )
    return ScenarioEnsemble(fine, realised, dB, qv, B, QV, None, rng_seed, indices)


def simulate_gbm(control, rng_seed: int, index: int, band: VolatilityBand | None = None,
                 grid: TimeGrid | None = None) -> ScenarioPath:
    """One G-Brownian scenario under ``control``.

    ``band`` and ``grid`` are only needed for :class:`Feedback` controls.
    """
    if isinstance(control, ControlPath):
        band, grid = control.band, control.grid
    elif band is None or grid is None:
        raise ValueError("feedback controls need band and grid")
    return simulate_batch([control], band, grid, rng_seed, [index]).path(0)


def coarsen(ens: ScenarioEnsemble, factor: int) -> ScenarioEnsemble:
    """Aggregate blocks of ``factor`` steps into one step.

    Volatility must be constant on each block (true for controls held with
    ``hold >= factor``).
    """
    if factor == 1:
        return ens
    S, n, d = ens.dB.shape
    if n % factor:
        raise ValueError("factor must divide the number of steps")
    grid = TimeGrid(ens.grid.t_start, ens.grid.t_end, n // factor)
    dB = ens.dB.reshape(S, -1, factor, d).sum(axis=2)
    qv = ens.qv_increments.reshape(S, -1, factor, d, d).sum(axis=2)
    B = np.concatenate([np.zeros((S, 1, d)), np.cumsum(dB, axis=1)], axis=1)
    QV = np.concatenate([np.zeros((S, 1, d, d)), np.cumsum(qv, axis=1)], axis=1)
    controls = []
    for c in ens.controls:
        blocks = c.gammas.reshape(-1, factor, d, d)
        if not np.array_equal(blocks, np.broadcast_to(blocks[:, :1], blocks.shape)):
            raise ValueError("volatility varies inside an aggregation block")
        controls.append(ControlPath(grid, blocks[:, 0], c.band))
    return ScenarioEnsemble(grid, tuple(controls), dB, qv, B, QV, None, ens.seed, ens.indices)


# --- G-SDE ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of ``dX = b dt + sum_ij h_ij d<B^i,B^j> + sigma dB``.

    Callables take ``(t, x)`` with ``x`` of shape ``(S, d)`` and return
    ``b: (S, d)``, ``h: (S, d, d, d)`` indexed ``[s, i, j, component]`` and
    ``sigma: (S, d, d)``.
    """

    dim: int
    b: Callable
    h: Callable
    sigma: Callable
    lipschitz_K: float | None = None

    @classmethod
    def scalar(cls, b, h, sigma, lipschitz_K: float | None = None) -> "CoefficientSet":
        """One-dimensional coefficients from functions of ``(t, x)`` with
        ``x`` of shape ``(S,)``; constants are accepted too."""
        def wrap(fn, shape):
            def call(t, x):
                val = fn(t, x[:, 0]) if callable(fn) else fn
                return np.broadcast_to(np.asarray(val, dtype=float), (x.shape[0],)).reshape(
                    (x.shape[0],) + shape)
            return call
        return cls(1, wrap(b, (1,)), wrap(h, (1, 1, 1)), wrap(sigma, (1, 1)), lipschitz_K)

    def evaluate(self, t: float, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.b(t, x), self.h(t, x), self.sigma(t, x)

    def check(self, points: np.ndarray, t: float = 0.0, rng: np.random.Generator | None = None,
              tol: float = 1e-12) -> None:
        """Spot-check symmetry of ``h`` and the Lipschitz bound."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        b, h, s = self.evaluate(t, pts)
        if not np.allclose(h, np.swapaxes(h, 1, 2), atol=tol):
            raise ValueError("h_ij != h_ji at a sampled point")
        if self.lipschitz_K is None or len(pts) < 2:
            return
        rng = rng or np.random.default_rng(0)
        perm = rng.permutation(len(pts))
        other = pts[perm]
        b2, h2, s2 = self.evaluate(t, other)
        lhs = (np.linalg.norm(b - b2, axis=-1)
               + np.abs(h - h2).sum(axis=(1, 2)).__pow__(2).sum(axis=-1) ** 0.5
               + np.linalg.norm(s - s2, axis=(1, 2)))
        rhs = self.lipschitz_K * np.linalg.norm(pts - other, axis=-1)
        if np.any(lhs > rhs + 1e-9):
            raise ValueError("Lipschitz bound violated at a sampled pair")


def euler_gsde(coeffs: CoefficientSet, x0, path):
    """Euler scheme driven by the path's ``dB`` and ``d<B>`` increments.

    Accepts a :class:`ScenarioPath` or a :class:`ScenarioEnsemble` and
    returns the same kind with ``X`` filled.
    """
    ens, single = _as_ensemble(path)
    S, n, d = ens.dB.shape
    if coeffs.dim != d:
        raise BandError(f"coefficients of dim {coeffs.dim} on a path of dim {d}")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, d)
                         if np.ndim(x0) > 1 else np.asarray(x0, dtype=float).reshape(d), (S, d))
    X = np.empty((S, n + 1, d))
    X[:, 0] = x0
    t = ens.grid.times
    dt = ens.grid.dt
    with np.errstate(all="ignore"):
        for k in range(n):
            b, h, s = coeffs.evaluate(t[k], X[:, k])
            X[:, k + 1] = (X[:, k] + b * dt
                           + np.einsum("sijc,sij->sc", h, ens.qv_increments[:, k])
                           + np.einsum("sij,sj->si", s, ens.dB[:, k]))
            if not np.all(np.isfinite(X[:, k + 1])):
                raise SimulationError(f"trajectory blow-up at step {k}", step=k)
    out = ens.with_x(X)
    return out.path(0) if single else out


# --- upper expectations -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class UpperEstimate:
    value: float
    std_error: float
    argmax: int
    means: np.ndarray
    std_errors: np.ndarray
    controls: tuple

    @property
    def argmax_control(self) -> ControlPath:
        return self.controls[self.argmax]

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "argmax": self.argmax,
            "means": self.means.tolist(),
            "std_errors": self.std_errors.tolist(),
        }


def default_family(band: VolatilityBand, grid: TimeGrid, n_controls: int, seed: int,
                   policies: Sequence = ("constant_random", "piecewise_random", "bang_bang")) -> list:
    """Endpoint constants followed by ``n_controls - 2`` sampled controls."""
    if n_controls < 1:
        raise ValueError("n_controls must be >= 1")
    family = [sample_control(band, grid, Fixed(band.sigma_lower)),
              sample_control(band, grid, Fixed(band.sigma_upper))][:max(n_controls, 2)]
    for c in range(n_controls - 2):
        name = policies[c % len(policies)]
        sub = int(np.random.SeedSequence([seed, c]).generate_state(1)[0])
        if name == "bang_bang":
            signs = np.random.default_rng(sub).choice([1, -1], size=grid.n_steps)
            policy = BangBang(tuple(signs))
        else:
            policy = name
        family.append(sample_control(band, grid, policy, sub))
    return family


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GCALC_THREADS", "1")))
    except ValueError:
        return 1


def estimate_upper_expectation(payoff: Callable, band: VolatilityBand, grid: TimeGrid,
                               n_controls: int, n_mc_per_control: int, seed: int,
                               coeffs: CoefficientSet | None = None, x0=None,
                               controls: Sequence | None = None,
                               path_payoff: bool = False) -> UpperEstimate:
    """Max over a control family of Monte Carlo means of ``payoff``.

    ``payoff`` maps terminal states ``(S, d)`` to ``(S,)`` -- ``X(T)`` when
    coefficients are given, else ``B(T)`` -- or, with ``path_payoff``, the
    whole :class:`ScenarioEnsemble`.  The family always contains the two
    constant endpoint controls unless ``controls`` is supplied.
    """
    if n_mc_per_control < 2:
        raise ValueError("n_mc_per_control must be >= 2")
    family = list(controls) if controls is not None else default_family(band, grid, n_controls, seed)

    def run(c_idx: int):
        idx = c_idx * n_mc_per_control + np.arange(n_mc_per_control)
        ens = simulate_batch([family[c_idx]] * n_mc_per_control, band, grid, seed, idx)
        if coeffs is not None:
            ens = euler_gsde(coeffs, np.zeros(band.dim) if x0 is None else x0, ens)
        vals = payoff(ens) if path_payoff else payoff((ens.X if coeffs is not None else ens.B)[:, -1])
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (n_mc_per_control,))
        return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_mc_per_control))

    workers = min(_threads(), len(family))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(family))))
    else:
        results = [run(i) for i in range(len(family))]
    means = np.array([r[0] for r in results])
    ses = np.array([r[1] for r in results])
    best = int(np.argmax(means))
    return UpperEstimate(float(means[best]), float(ses[best]), best, means, ses, tuple(family))


def path_rows(path: ScenarioPath):
    """CSV header and rows ``k,t,B_1..B_d,QV_11..QV_dd,X_1..X_d``."""
    d = path.dim
    header = (["k", "t"] + [f"B_{i + 1}" for i in range(d)]
              + [f"QV_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
              + ([f"X_{i + 1}" for i in range(d)] if path.X is not None else []))
    rows = []
    for k, t in enumerate(path.grid.times):
        row = [k, float(t)] + path.B[k].tolist() + path.QV[k].reshape(-1).tolist()
        if path.X is not None:
            row += path.X[k].tolist()
        rows.append(row)
    return header, rows
