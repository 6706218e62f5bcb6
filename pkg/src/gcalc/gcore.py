"""Volatility bands and the generating function G.

The band ``[sigma_lower, sigma_upper]`` is an order interval of symmetric
matrices.  ``G(A) = 1/2 sup_{gamma in band} trace(A gamma^2)``.  In one
dimension this is the familiar ``(s_up^2 a^+ - s_lo^2 a^-) / 2``.

For matrices the supremum is found by projected gradient ascent.  The
band is parametrised by the congruence ``gamma = L + W^1/2 C W^1/2`` with
``W = sigma_upper - sigma_lower`` and ``0 <= C <= I``.  Projecting onto
``[0, I]`` is an eigenvalue clip, so every iterate is feasible and the
reported value is a genuine lower bound on G.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SYM_TOL = 1e-12
COMMUTE_TOL = 1e-10


class BandError(ValueError):
    """Raised for malformed bands or dimension mismatches."""


def _as_matrix(value, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1) if dim is None else float(arr) * np.eye(dim)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise BandError(f"expected a square matrix, got shape {arr.shape}")
    return arr


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def sym_sqrt(m: np.ndarray) -> np.ndarray:
    """Principal square root of a positive semidefinite matrix."""
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(m))[0])


def _commutes(x: np.ndarray, y: np.ndarray) -> bool:
    scale = np.linalg.norm(x) * np.linalg.norm(y)
    return np.linalg.norm(x @ y - y @ x) <= COMMUTE_TOL * max(scale, 1e-300)


@dataclass(frozen=True, eq=False)
class VolatilityBand:
    """Order interval ``[sigma_lower, sigma_upper]`` of symmetric matrices.

    Scalars are accepted for the one-dimensional case.  The strict order
    ``0 < sigma_lower < sigma_upper`` is enforced; a singleton band (no
    volatility uncertainty) must be requested through :meth:`singleton`.
    """

    sigma_lower: np.ndarray
    sigma_upper: np.ndarray
    allow_singleton: bool = field(default=False, repr=False)

    def __post_init__(self):
        lo = _as_matrix(self.sigma_lower)
        up = _as_matrix(self.sigma_upper, lo.shape[0])
        if lo.ndim == 2 and up.shape != lo.shape:
            raise BandError(f"band matrices disagree: {lo.shape} vs {up.shape}")
        lo, up = symmetrize(lo), symmetrize(up)
        lo.setflags(write=False)
        up.setflags(write=False)
        object.__setattr__(self, "sigma_lower", lo)
        object.__setattr__(self, "sigma_upper", up)
        if min_eig(lo) <= 0:
            raise BandError("sigma_lower must be positive definite")
        gap = min_eig(up - lo)
        if self.allow_singleton:
            if np.linalg.norm(up - lo) > SYM_TOL * max(1.0, np.linalg.norm(up)):
                raise BandError("singleton band needs sigma_lower == sigma_upper")
        elif gap <= 0:
            raise BandError("sigma_upper - sigma_lower must be positive definite")

    @classmethod
    def singleton(cls, sigma) -> "VolatilityBand":
        """Degenerate band with one admissible volatility (classical case)."""
        return cls(sigma, sigma, allow_singleton=True)

    @property
    def dim(self) -> int:
        return self.sigma_lower.shape[0]

    @property
    def is_singleton(self) -> bool:
        return self.allow_singleton

    @cached_property
    def lower_sq(self) -> np.ndarray:
        return self.sigma_lower @ self.sigma_lower

    @cached_property
    def upper_sq(self) -> np.ndarray:
        return self.sigma_upper @ self.sigma_upper

    @cached_property
    def width(self) -> np.ndarray:
        return self.sigma_upper - self.sigma_lower

    @cached_property
    def width_sqrt(self) -> np.ndarray:
        return sym_sqrt(self.width)

    def scalar(self) -> tuple[float, float]:
        """``(sigma_lower, sigma_upper)`` as floats; only for ``dim == 1``."""
        _require_scalar(self)
        return float(self.sigma_lower[0, 0]), float(self.sigma_upper[0, 0])

    def contains(self, gamma, tol: float = 1e-10) -> bool:
        g = symmetrize(_as_matrix(gamma, self.dim))
        if g.shape != self.sigma_lower.shape:
            return False
        return min_eig(g - self.sigma_lower) >= -tol and min_eig(self.sigma_upper - g) >= -tol

    def from_unit(self, c: np.ndarray) -> np.ndarray:
        """Map ``0 <= C <= I`` onto the band (batched over leading axes)."""
        wh = self.width_sqrt
        return symmetrize(self.sigma_lower + wh @ c @ wh)

    def to_dict(self) -> dict:
        return {
            "d": self.dim,
            "sigma_lower": self.sigma_lower.tolist(),
            "sigma_upper": self.sigma_upper.tolist(),
        }


def _require_scalar(band: VolatilityBand) -> None:
    if band.dim != 1:
        raise BandError("band not scalar")


def eval_g_1d(a, band: VolatilityBand):
    """``(s_up^2 a^+ - s_lo^2 a^-) / 2``; vectorised over ``a``."""
    lo, up = band.scalar()
    a = np.asarray(a, dtype=float)
    out = 0.5 * (up * up * np.maximum(a, 0.0) - lo * lo * np.maximum(-a, 0.0))
    return float(out) if out.ndim == 0 else out


def eval_g_inverse_1d(y, band: VolatilityBand):
    lo, up = band.scalar()
    y = np.asarray(y, dtype=float)
    out = np.where(y >= 0, 2.0 * y / (up * up), 2.0 * y / (lo * lo))
    return float(out) if out.ndim == 0 else out


def nondegeneracy_delta(band: VolatilityBand) -> float:
    """Smallest eigenvalue of ``sigma_lower^2``."""
    return float(np.linalg.eigvalsh(band.lower_sq)[0])


def _clip_unit(y: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(symmetrize(y))
    return (v * np.clip(w, 0.0, 1.0)[..., None, :]) @ np.swapaxes(v, -1, -2)


def project_to_band(m, band: VolatilityBand) -> np.ndarray:
    """Map a symmetric matrix into the band.

    Works in the congruence coordinates ``C = W^-1/2 (M - L) W^-1/2`` and
    clips the eigenvalues of ``C`` into ``[0, 1]``.  Points already in the
    band are returned unchanged; for ``d = 1`` this is a scalar clamp.
    """
    m = symmetrize(_as_matrix(m, band.dim))
    if m.shape != band.sigma_lower.shape:
        raise BandError(f"matrix of shape {m.shape} does not match band dim {band.dim}")
    if band.is_singleton:
        return band.sigma_lower.copy()
    if band.contains(m, tol=0.0):
        return m
    if band.dim == 1:
        lo, up = band.scalar()
        return np.array([[min(max(m[0, 0], lo), up)]])
    w, v = np.linalg.eigh(band.width)
    inv_sqrt = (v / np.sqrt(w)) @ v.T
    c = inv_sqrt @ (m - band.sigma_lower) @ inv_sqrt
    return band.from_unit(_clip_unit(c))


def random_gamma(band: VolatilityBand, rng: np.random.Generator) -> np.ndarray:
    """Draw a feasible volatility: ``L + W^1/2 Q^T diag(u) Q W^1/2``.

    ``Q`` is Haar-orthogonal and ``u_i ~ U[0, 1]``; for ``d = 1`` this is a
    uniform draw on ``[sigma_lower, sigma_upper]``.
    """
    d = band.dim
    u = rng.uniform(0.0, 1.0, d)
    if d == 1:
        return band.from_unit(u.reshape(1, 1))
    q = _haar(rng, d)
    return band.from_unit((q.T * u) @ q)


def _haar(rng: np.random.Generator, d: int) -> np.ndarray:
    z = rng.standard_normal((d, d))
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class AscentOptions:
    """Settings for the projected ascent used by :func:`eval_g_matrix`."""

    n_random: int = 8
    max_iter: int = 5000
    tol: float = 1e-14
    seed: int = 20240611
    force_ascent: bool = False


@dataclass(frozen=True, eq=False)
class GEvaluation:
    value: float
    exact: bool
    converged: bool
    gamma: np.ndarray | None = None
    iterations: int = 0

    @property
    def lower_bound_only(self) -> bool:
        return not (self.exact or self.converged)


def closed_form_g(a: np.ndarray, band: VolatilityBand) -> float:
    """``1/2 (tr(s_up^2 A+) - tr(s_lo^2 A-))`` for a commuting triple.

    Always attained by a feasible volatility, hence a lower bound on G.  It
    equals G when ``A+`` lives in the top eigenspace of ``sigma_upper^2``
    (see :func:`closed_form_is_exact`).
    """
    w, v = np.linalg.eigh(a)
    pos = (v * np.maximum(w, 0.0)) @ v.T
    neg = (v * np.maximum(-w, 0.0)) @ v.T
    return 0.5 * (float(np.sum(band.upper_sq * pos)) - float(np.sum(band.lower_sq * neg)))


def is_commuting(a: np.ndarray, band: VolatilityBand) -> bool:
    lo, up = band.lower_sq, band.upper_sq
    return _commutes(lo, a) and _commutes(up, a) and _commutes(lo, up)


def closed_form_is_exact(a: np.ndarray, band: VolatilityBand) -> bool:
    """True when the commuting closed form is the supremum.

    ``gamma <= sigma_upper`` bounds ``e^T gamma^2 e`` by the top eigenvalue
    of ``sigma_upper^2`` only, so directions where A is positive must sit in
    that top eigenspace.
    """
    w, v = np.linalg.eigh(a)
    pos = (v * np.maximum(w, 0.0)) @ v.T
    top = float(np.linalg.eigvalsh(band.upper_sq)[-1])
    resid = np.linalg.norm(band.upper_sq @ pos - top * pos)
    return resid <= COMMUTE_TOL * max(top * np.linalg.norm(pos), 1e-300)


def _ascent(a: np.ndarray, band: VolatilityBand, opts: AscentOptions) -> GEvaluation:
    d = band.dim
    wh = band.width_sqrt
    lo = band.sigma_lower
    rng = np.random.default_rng(opts.seed)
    starts = [np.zeros((d, d)), np.eye(d)]
    for _ in range(opts.n_random):
        q = _haar(rng, d)
        starts.append((q.T * rng.uniform(0.0, 1.0, d)) @ q)
    # positive eigenspace of the pulled-back objective; exact optimum for
    # commuting inputs
    w, v = np.linalg.eigh(wh @ a @ wh)
    starts.append((v * (w > 0)) @ v.T)
    c = np.array(starts)

    norm_a = np.linalg.norm(a, 2)
    norm_w = np.linalg.norm(band.width, 2)
    step = 1.0 / (norm_a * norm_w * norm_w)
    stop = opts.tol * norm_a * max(np.linalg.norm(band.upper_sq, 2), 1e-300)

    prev = None
    converged = False
    it = 0
    for it in range(opts.max_iter + 1):
        g = lo + wh @ c @ wh
        cur = 0.5 * np.einsum("ij,kji->k", a, g @ g)
        # every start must stall: a slow climber may still overtake the leader
        if prev is not None and np.all(np.abs(cur - prev) <= stop):
            converged = True
            break
        if it == opts.max_iter:
            break
        prev = cur
        grad = wh @ (0.5 * (a @ g + g @ a)) @ wh
        c = _clip_unit(c + step * grad)
    best = int(np.argmax(cur))
    gamma = band.from_unit(c[best])
    return GEvaluation(float(cur[best]), False, converged, gamma, it)


def eval_g_matrix(a, band: VolatilityBand, opts: AscentOptions | None = None,
                  *, return_info: bool = False):
    """G(A) for a symmetric matrix A.

    Exact in one dimension, for singleton bands, and for commuting triples
    whose closed form is provably the supremum.  Otherwise projected ascent
    with multi-start; non-convergence leaves ``lower_bound_only`` set on the
    returned :class:`GEvaluation` (``return_info=True``).
    """
    opts = opts or AscentOptions()
    a = symmetrize(_as_matrix(a, band.dim))
    if a.shape != band.sigma_lower.shape:
        raise BandError(f"matrix of shape {a.shape} does not match band dim {band.dim}")

    if band.dim == 1 and not opts.force_ascent:
        res = GEvaluation(eval_g_1d(a[0, 0], band), True, True)
    elif band.is_singleton:
        res = GEvaluation(0.5 * float(np.sum(a * band.upper_sq)), True, True, band.sigma_upper)
    elif not np.any(a):
        res = GEvaluation(0.0, True, True)
    elif (not opts.force_ascent and is_commuting(a, band)
          and closed_form_is_exact(a, band)):
        res = GEvaluation(closed_form_g(a, band), True, True)
    else:
        # the ascent runs on A / max|A_ij| so that G(lam A) == lam G(A)
        # holds by construction and tiny or huge scales cannot overflow the step
        scale = float(np.max(np.abs(a)))
        res = _ascent(a / scale, band, opts)
        res = GEvaluation(res.value * scale, False, res.converged, res.gamma, res.iterations)
    return res if return_info else res.value


def eval_g_batch(mats: np.ndarray, band: VolatilityBand,
                 opts: AscentOptions | None = None) -> tuple[np.ndarray, bool]:
    """G over a stack of matrices ``(..., d, d)``.

    Returns ``(values, lower_bound_only)`` where the flag is set if any
    entry came from a non-converged ascent.
    """
    mats = np.asarray(mats, dtype=float)
    if band.dim == 1:
        return np.asarray(eval_g_1d(mats[..., 0, 0], band), dtype=float), False
    if band.is_singleton:
        return 0.5 * np.einsum("...ij,ji->...", mats, band.upper_sq), False
    flat = mats.reshape(-1, band.dim, band.dim)
    out = np.empty(flat.shape[0])
    flagged = False
    for k, m in enumerate(flat):
        info = eval_g_matrix(m, band, opts, return_info=True)
        out[k] = info.value
        flagged = flagged or info.lower_bound_only
    return out.reshape(mats.shape[:-2]), flagged
