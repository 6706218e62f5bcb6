"""Additive functionals of G-SDE solutions.

For a spec ``(alpha, beta, f, g)`` the functional on a discrete path is the
left-point sum of ``beta G(f) dt + alpha <f, d<B>> + <g, dB>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from gcalc.gcore import AscentOptions, VolatilityBand, eval_g_batch
from gcalc.scenario import CoefficientSet, ScenarioEnsemble, ScenarioPath, TimeGrid, _as_ensemble

COND_CAP = 1e8


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    """``f(t, x)`` returns ``(S, d, d)`` and ``g(t, x)`` returns ``(S, d)``
    for states ``x`` of shape ``(S, d)``."""

    alpha: float
    beta: float
    f: Callable
    g: Callable
    dim: int = 1

    def eval_f(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.f(t, x), dtype=float), (x.shape[0], self.dim, self.dim))

    def eval_g(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.g(t, x), dtype=float), (x.shape[0], self.dim))

    @classmethod
    def scalar(cls, alpha: float, beta: float, f, g) -> "FunctionalSpec":
        """One-dimensional spec from scalar functions of ``(t, x)`` or constants."""
        def wrap(fn, shape):
            def call(t, x):
                val = fn(t, x[:, 0]) if callable(fn) else fn
                return np.broadcast_to(np.asarray(val, dtype=float), (x.shape[0],)).reshape(
                    (x.shape[0],) + shape)
            return call
        return cls(float(alpha), float(beta), wrap(f, (1, 1)), wrap(g, (1,)), 1)

    def check(self, points: np.ndarray, t: float = 0.0, tol: float = 1e-12) -> None:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        f = self.eval_f(t, pts)
        if not np.allclose(f, np.swapaxes(f, 1, 2), atol=tol):
            raise ValueError("f is not symmetric at a sampled point")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(self.eval_g(t, pts)))):
            raise ValueError("f or g not finite at a sampled point")


@dataclass(frozen=True, eq=False)
class FunctionalTrace:
    grid: TimeGrid
    A: np.ndarray
    lower_bound_only: bool = False

    def rows(self):
        return ["k", "t", "A"], [[k, float(t), float(a)] for k, (t, a) in enumerate(zip(self.grid.times, self.A))]


def _increments(spec: FunctionalSpec, band: VolatilityBand, ens: ScenarioEnsemble,
                opts: AscentOptions | None):
    if ens.X is None:
        raise ValueError("path has no X; integrate the SDE first")
    S, n, d = ens.dB.shape
    if spec.dim != d or band.dim != d:
        raise ValueError(f"dimension mismatch: spec {spec.dim}, band {band.dim}, path {d}")
    t = ens.grid.times
    dt = ens.grid.dt
    inc = np.empty((S, n))
    flagged = False
    for k in range(n):
        x = ens.X[:, k]
        f = spec.eval_f(t[k], x)
        g = spec.eval_g(t[k], x)
        term = np.einsum("si,si->s", g, ens.dB[:, k])
        if spec.beta != 0.0:
            gv, lb = eval_g_batch(f, band, opts)
            flagged |= lb
            term = term + spec.beta * gv * dt
        if spec.alpha != 0.0:
            term = term + spec.alpha * np.einsum("sij,sij->s", f, ens.qv_increments[:, k])
        inc[:, k] = term
    return inc, flagged


def evaluate(spec: FunctionalSpec, band: VolatilityBand, path, opts: AscentOptions | None = None):
    """Left-point evaluation of the functional along ``path``.

    Returns one :class:`FunctionalTrace` for a path, or a list for an
    ensemble.
    """
    ens, single = _as_ensemble(path)
    inc, flagged = _increments(spec, band, ens, opts)
    A = np.concatenate([np.zeros((inc.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1)
    traces = [FunctionalTrace(ens.grid, A[i], flagged) for i in range(A.shape[0])]
    return traces[0] if single else traces


def evaluate_array(spec: FunctionalSpec, band: VolatilityBand, ens: ScenarioEnsemble,
                   opts: AscentOptions | None = None) -> tuple[np.ndarray, bool]:
    """Node values ``(S, n + 1)`` of the functional on an ensemble, plus the
    lower-bound flag of the G evaluations."""
    inc, flagged = _increments(spec, band, ens, opts)
    return np.concatenate([np.zeros((inc.shape[0], 1)), np.cumsum(inc, axis=1)], axis=1), flagged


def girsanov_spec(coeffs: CoefficientSet, sample_points, t_samples=(0.0,)) -> FunctionalSpec:
    """Spec with ``alpha = 1``, ``beta = -1``, ``g = sigma^{-1}(b + sum_i h_ii)``
    and ``f = |g|^2 / d * I``.

    ``sigma`` must be invertible with condition number below ``1e8`` at the
    sampled points.
    """
    d = coeffs.dim
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    for t in t_samples:
        _, _, s = coeffs.evaluate(t, pts)
        cond = np.linalg.cond(s)
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > COND_CAP))
        if bad.size:
            raise ValueError(f"sigma singular at t={t}, x={pts[bad[0]].tolist()}")

    def g(t, x):
        b, h, s = coeffs.evaluate(t, x)
        drift = b + np.einsum("siic->sc", h)
        return np.linalg.solve(s, drift[..., None])[..., 0]

    def f(t, x):
        gv = g(t, x)
        return (np.einsum("si,si->s", gv, gv) / d)[:, None, None] * np.eye(d)

    return FunctionalSpec(1.0, -1.0, f, g, d)


def alpha_rescale(spec: FunctionalSpec) -> FunctionalSpec:
    """Equivalent spec with ``alpha = 1``; the functional is divided by alpha."""
    if spec.alpha == 0.0:
        raise ValueError("alpha = 0: functional not reducible")
    if spec.alpha == 1.0:
        return spec
    a = spec.alpha
    return FunctionalSpec(1.0, spec.beta / a, spec.f, lambda t, x: spec.eval_g(t, x) / a, spec.dim)
