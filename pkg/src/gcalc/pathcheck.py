"""Numerical checks of path independence and of the unique dt / d<B> / dB decomposition.

A functional ``A^{f,g}`` is path independent with potential ``V`` when,
for every scenario, ``A_{s,t} = V(t, X_t) - V(s, X_s)``.  By Ito's formula
this is equivalent to three pointwise identities:

* ``dV/dt + <grad V, b> = beta G(f)``
* ``alpha f_ij = <grad V, h_ij> + 1/2 <sigma_i, hess V sigma_j>``
* ``g = sigma^T grad V``

:func:`pde_residuals` measures these on an explicit grid and
:func:`pathwise_residual` measures the identity along simulated paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gcalc.functional import FunctionalSpec, evaluate_array
from gcalc.gcore import AscentOptions, VolatilityBand, eval_g_batch
from gcalc.scenario import (
    BangBang,
    CoefficientSet,
    ControlPath,
    Feedback,
    Fixed,
    ScenarioEnsemble,
    ScenarioPath,
    TimeGrid,
    _as_ensemble,
    coarsen,
    euler_gsde,
    sample_control,
    simulate_batch,
)

FD_STEP = 1e-4


# --- value functions --------------------------------------------------------

def _t_like(t, n):
    return np.broadcast_to(np.asarray(t, dtype=float), (n,))


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """``V(t, x)`` with ``x`` of shape ``(S, d)`` and ``t`` scalar or ``(S,)``.

    Derivatives not supplied are computed by centered differences with one
    Richardson extrapolation step.
    """

    V: Callable
    dim: int = 1
    dV_dt_fn: Callable | None = None
    grad_fn: Callable | None = None
    hessian_fn: Callable | None = None
    hx: float = FD_STEP
    ht: float = FD_STEP

    @property
    def mode(self) -> str:
        if None in (self.dV_dt_fn, self.grad_fn, self.hessian_fn):
            return "finite_difference"
        return "analytic"

    @classmethod
    def scalar(cls, V, dV_dt=None, dV_dx=None, d2V_dx2=None, hx=FD_STEP, ht=FD_STEP) -> "ValueFunction":
        """One-dimensional value function from functions of ``(t, x)`` with
        ``x`` of shape ``(S,)``."""
        def lift(fn, shape):
            if fn is None:
                return None

            def call(t, x):
                return np.broadcast_to(np.asarray(fn(t, x[:, 0]), dtype=float),
                                       (x.shape[0],)).reshape((x.shape[0],) + shape)
            return call
        return cls(lift(V, ()), 1, lift(dV_dt, ()), lift(dV_dx, (1,)), lift(d2V_dx2, (1, 1)), hx, ht)

    @classmethod
    def constant(cls, c: float, dim: int = 1) -> "ValueFunction":
        zero = lambda t, x: np.zeros(x.shape[0])  # noqa: E731
        return cls(lambda t, x: np.full(x.shape[0], float(c)), dim, zero,
                   lambda t, x: np.zeros_like(x), lambda t, x: np.zeros((x.shape[0], dim, dim)))

    def value(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(self.V(t, x), dtype=float), (x.shape[0],))

    def dV_dt(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dV_dt_fn is not None:
            return np.broadcast_to(np.asarray(self.dV_dt_fn(t, x), dtype=float), (x.shape[0],))
        t = _t_like(t, x.shape[0])

        def central(h):
            return (self.value(t + h, x) - self.value(t - h, x)) / (2 * h)
        return _richardson(central, self.ht)

    def grad(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.grad_fn is not None:
            return np.broadcast_to(np.asarray(self.grad_fn(t, x), dtype=float), x.shape)
        out = np.empty_like(x)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0

            def central(h):
                return (self.value(t, x + h * e) - self.value(t, x - h * e)) / (2 * h)
            out[:, i] = _richardson(central, self.hx)
        return out

    def hessian(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.hessian_fn is not None:
            return np.broadcast_to(np.asarray(self.hessian_fn(t, x), dtype=float),
                                   (x.shape[0], self.dim, self.dim))
        d = self.dim
        out = np.empty((x.shape[0], d, d))
        eye = np.eye(d)
        v0 = self.value(t, x)
        for i in range(d):
            def second(h, i=i):
                return (self.value(t, x + h * eye[i]) - 2 * v0 + self.value(t, x - h * eye[i])) / (h * h)
            out[:, i, i] = _richardson(second, self.hx)
            for j in range(i):
                def mixed(h, i=i, j=j):
                    return (self.value(t, x + h * (eye[i] + eye[j])) - self.value(t, x + h * (eye[i] - eye[j]))
                            - self.value(t, x - h * (eye[i] - eye[j]))
                            + self.value(t, x - h * (eye[i] + eye[j]))) / (4 * h * h)
                out[:, i, j] = out[:, j, i] = _richardson(mixed, self.hx)
        return out

    def with_drift(self, c: float) -> "ValueFunction":
        """``V + c t``: breaks the time-derivative identity by exactly ``c``."""
        dt = self.dV_dt
        return ValueFunction(
            lambda t, x: self.value(t, x) + c * np.asarray(t, dtype=float),
            self.dim, lambda t, x: dt(t, x) + c, self.grad, self.hessian, self.hx, self.ht,
        )


def _richardson(central: Callable[[float], np.ndarray], h: float) -> np.ndarray:
    """Second-order centered differences combined to fourth order."""
    return (4.0 * central(h / 2) - central(h)) / 3.0


# --- PDE residuals ----------------------------------------------------------

@dataclass(frozen=True)
class PdeResidualReport:
    sup_r1: float
    sup_r2: float
    sup_r3: float
    worst_r1: list
    worst_r2: list
    worst_r3: list
    n_points: int
    lower_bound_only: bool = False

    @property
    def max(self) -> float:
        return max(self.sup_r1, self.sup_r2, self.sup_r3)

    def to_dict(self) -> dict:
        return {
            "sup_r1": self.sup_r1, "sup_r2": self.sup_r2, "sup_r3": self.sup_r3,
            "worst_points": {"r1": self.worst_r1, "r2": self.worst_r2, "r3": self.worst_r3},
            "n_points": self.n_points, "lower_bound_only": self.lower_bound_only,
        }


def product_grid(t_values, x_axes) -> np.ndarray:
    """Rows ``(t, x_1, ..., x_d)`` covering the Cartesian product."""
    mesh = np.meshgrid(np.asarray(t_values, dtype=float), *[np.asarray(a, dtype=float) for a in x_axes],
                       indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def pointwise_residuals(V: ValueFunction, coeffs: CoefficientSet, spec: FunctionalSpec,
                        band: VolatilityBand, t: float, x: np.ndarray,
                        opts: AscentOptions | None = None):
    """Residual arrays ``(r1, r2, r3)`` at a common time ``t`` and states ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b, h, s = coeffs.evaluate(t, x)
    f, g = spec.eval_f(t, x), spec.eval_g(t, x)
    dv, grad, hess = V.dV_dt(t, x), V.grad(t, x), V.hessian(t, x)
    gf, flag = eval_g_batch(f, band, opts)
    r1 = np.abs(dv + np.einsum("sc,sc->s", grad, b) - spec.beta * gf)
    ito = np.einsum("sc,sijc->sij", grad, h) + 0.5 * np.einsum("sai,sab,sbj->sij", s, hess, s)
    r2 = np.abs(spec.alpha * f - ito).max(axis=(1, 2))
    r3 = np.linalg.norm(g - np.einsum("sai,sa->si", s, grad), axis=1)
    return r1, r2, r3, flag


def pde_residuals(V: ValueFunction, coeffs: CoefficientSet, spec: FunctionalSpec,
                  band: VolatilityBand, eval_grid, opts: AscentOptions | None = None) -> PdeResidualReport:
    """Sup norms of the three residuals over the rows ``(t, x...)`` of ``eval_grid``."""
    pts = np.atleast_2d(np.asarray(eval_grid, dtype=float))
    r = np.zeros((3, pts.shape[0]))
    flagged = False
    for t in np.unique(pts[:, 0]):
        sel = pts[:, 0] == t
        r1, r2, r3, flag = pointwise_residuals(V, coeffs, spec, band, float(t), pts[sel, 1:], opts)
        r[:, sel] = r1, r2, r3
        flagged |= flag
    r = np.where(np.isnan(r), np.inf, r)
    worst = r.argmax(axis=1)
    return PdeResidualReport(
        float(r[0].max()), float(r[1].max()), float(r[2].max()),
        pts[worst[0]].tolist(), pts[worst[1]].tolist(), pts[worst[2]].tolist(),
        pts.shape[0], flagged,
    )


# --- pathwise residual ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathwiseReport:
    per_scenario_max: np.ndarray
    ensemble_max: float
    ensemble_mean: float
    dt: float
    worst_scenario: int

    def to_dict(self) -> dict:
        return {
            "ensemble_max": self.ensemble_max, "ensemble_mean": self.ensemble_mean,
            "dt": self.dt, "worst_scenario": self.worst_scenario,
            "per_scenario_max": self.per_scenario_max.tolist(),
        }


def _to_ensemble(scenarios) -> ScenarioEnsemble:
    if isinstance(scenarios, ScenarioEnsemble):
        return scenarios
    if isinstance(scenarios, ScenarioPath):
        return _as_ensemble(scenarios)[0]
    return ScenarioEnsemble.from_paths(list(scenarios))


def residual_paths(V: ValueFunction, spec: FunctionalSpec, band: VolatilityBand,
                   ens: ScenarioEnsemble, opts: AscentOptions | None = None) -> np.ndarray:
    """``|A_k - (V(t_k, X_k) - V(s, X_0))|`` with shape ``(S, n + 1)``."""
    A, _ = evaluate_array(spec, band, ens, opts)
    times = ens.grid.times
    v = np.stack([V.value(t, ens.X[:, k]) for k, t in enumerate(times)], axis=1)
    return np.abs(A - (v - v[:, :1]))


def pathwise_residual(V: ValueFunction, coeffs: CoefficientSet, spec: FunctionalSpec,
                      band: VolatilityBand, scenarios, s: float | None = None,
                      opts: AscentOptions | None = None) -> PathwiseReport:
    """Defect of the path-independence identity along each scenario.

    ``scenarios`` must carry ``X`` generated from ``coeffs``; the paths
    start at time ``s`` (the grid start).
    """
    ens = _to_ensemble(scenarios)
    if ens.X is None:
        raise ValueError("scenarios have no X; integrate the SDE first")
    if coeffs.dim != ens.dim:
        raise ValueError("coefficient and path dimensions differ")
    if s is not None and not np.isclose(s, ens.grid.t_start):
        raise ValueError(f"paths start at {ens.grid.t_start}, not at s={s}")
    per = residual_paths(V, spec, band, ens, opts).max(axis=1)
    per = np.where(np.isnan(per), np.inf, per)
    return PathwiseReport(per, float(per.max()), float(per.mean()), ens.grid.dt, int(per.argmax()))


# --- convergence order ------------------------------------------------------

def mixed_family(band: VolatilityBand, grid: TimeGrid, n: int, seed: int) -> list:
    """Cycle of constant, piecewise, bang-bang, state-feedback and endpoint controls."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    feedback = Feedback(lambda t, b: (b[:, 0] > 0).astype(float), "upper_when_positive")
    out = []
    for i in range(n):
        kind = i % 6
        sub = int(rng.integers(2**63))
        if kind == 0:
            out.append(sample_control(band, grid, Fixed(band.sigma_upper)))
        elif kind == 1:
            out.append(sample_control(band, grid, Fixed(band.sigma_lower)))
        elif kind == 2:
            out.append(sample_control(band, grid, "constant_random", sub))
        elif kind == 3:
            out.append(sample_control(band, grid, "piecewise_random", sub))
        elif kind == 4:
            signs = np.random.default_rng(sub).choice([1, -1], size=grid.n_steps)
            out.append(sample_control(band, grid, BangBang(tuple(int(v) for v in signs))))
        else:
            out.append(feedback)
    return out


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    dts: np.ndarray
    ensemble_max: np.ndarray
    ensemble_mean: np.ndarray
    slope: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "dts": self.dts.tolist(), "ensemble_max": self.ensemble_max.tolist(),
            "ensemble_mean": self.ensemble_mean.tolist(), "slope": self.slope,
            "degenerate": self.degenerate,
        }


def fit_slope(dts, values) -> tuple[float, bool]:
    """Least-squares slope of ``log(values)`` on ``log(dts)``; ``(inf, True)``
    when a value is zero."""
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0.0):
        return float("inf"), True
    if not np.all(np.isfinite(values)):
        return float("nan"), True
    slope = np.polyfit(np.log(np.asarray(dts, dtype=float)), np.log(values), 1)[0]
    return float(slope), False


def refined_ensembles(band: VolatilityBand, dt_list: Sequence[float], t_start: float, t_end: float,
                      n_scenarios: int, seed: int, controls: Sequence | None = None) -> list:
    """Nested ensembles, one per ``dt``, sharing one Brownian skeleton.

    Paths are generated at the finest step with each control decision held
    over a coarsest step, then aggregated to the coarser levels.
    """
    dts = np.asarray(dt_list, dtype=float)
    if dts.size < 3:
        raise ValueError("need at least three step sizes")
    if np.any(np.diff(dts) >= 0):
        raise ValueError("dt_list must be decreasing")
    horizon = t_end - t_start
    steps = np.rint(horizon / dts).astype(int)
    if not np.allclose(steps * dts, horizon, rtol=1e-12, atol=0):
        raise ValueError("every dt must divide the horizon")
    if np.any(steps[-1] % steps):
        raise ValueError("step sizes must be nested refinements")
    coarse = TimeGrid(t_start, t_end, int(steps[0]))
    family = list(controls) if controls is not None else mixed_family(band, coarse, n_scenarios, seed)
    if len(family) != n_scenarios:
        raise ValueError("one control per scenario is required")
    fine = simulate_batch(family, band, coarse, seed, np.arange(n_scenarios), hold=int(steps[-1] // steps[0]))
    return [coarsen(fine, int(steps[-1] // m)) for m in steps]


def convergence_order(V: ValueFunction, coeffs: CoefficientSet, spec: FunctionalSpec,
                      band: VolatilityBand, dt_list: Sequence[float], n_scenarios: int, seed: int,
                      x0=0.0, t_start: float = 0.0, t_end: float = 1.0, controls: Sequence | None = None,
                      opts: AscentOptions | None = None) -> ConvergenceReport:
    """Fitted order of the pathwise defect under step refinement."""
    levels = refined_ensembles(band, dt_list, t_start, t_end, n_scenarios, seed, controls)
    maxima, means = [], []
    for ens in levels:
        rep = pathwise_residual(V, coeffs, spec, band, euler_gsde(coeffs, x0, ens), opts=opts)
        maxima.append(rep.ensemble_max)
        means.append(rep.ensemble_mean)
    slope, degenerate = fit_slope(dt_list, maxima)
    return ConvergenceReport(np.asarray(dt_list, dtype=float), np.array(maxima), np.array(means),
                             slope, degenerate)


# --- Ito integrals and the decomposition check -----------------------------

def _process(p, ens: ScenarioEnsemble, k: int, shape: tuple) -> np.ndarray:
    """Value of a process at step ``k`` for every scenario.

    ``p`` is a constant, an array over steps (optionally with a leading
    scenario axis), or a callable ``(t, B_k) -> array``.
    """
    S = len(ens)
    if callable(p):
        val = p(ens.grid.times[k], ens.B[:, k])
    else:
        arr = np.asarray(p, dtype=float)
        if arr.ndim == len(shape) + 2:
            val = arr[:, k]
        elif arr.ndim == len(shape) + 1:
            val = arr[k]
        else:
            val = arr
    return np.broadcast_to(np.asarray(val, dtype=float), (S,) + shape)


def integrate_ito(xi, eta, zeta, path):
    """``X_k`` for ``X = int xi dt + sum_ij int eta^{ij} d<B^i,B^j> + int zeta dB``.

    Shapes per step: ``xi`` ``(d,)``, ``eta`` ``(d, d, d)`` indexed
    ``[i, j, component]``, ``zeta`` ``(d, d)`` acting on ``dB``.  Returns
    ``(n + 1, d)`` for a path and ``(S, n + 1, d)`` for an ensemble.
    """
    ens, single = _as_ensemble(path)
    S, n, d = ens.dB.shape
    X = np.zeros((S, n + 1, d))
    dt = ens.grid.dt
    for k in range(n):
        a = _process(xi, ens, k, (d,))
        e = _process(eta, ens, k, (d, d, d))
        z = _process(zeta, ens, k, (d, d))
        X[:, k + 1] = (X[:, k] + a * dt + np.einsum("sijc,sij->sc", e, ens.qv_increments[:, k])
                       + np.einsum("sci,si->sc", z, ens.dB[:, k]))
    return X[0] if single else X


def delta_n(t, n: int, horizon: float = 1.0) -> np.ndarray:
    """Alternating step function: ``(-1)^i`` on ``(i/n, (i+1)/n]`` for
    ``1 <= i <= n - 1`` after rescaling time by ``horizon``; zero on ``(0, 1/n]``."""
    u = np.asarray(t, dtype=float) / horizon
    i = np.ceil(u * n - 1e-12).astype(int) - 1
    return np.where((i >= 1) & (i <= n - 1), np.where(i % 2 == 0, 1.0, -1.0), 0.0)


def aligned_controls(band: VolatilityBand, grid: TimeGrid, n: int) -> list:
    """Bang-bang control matching the sign of ``delta_n`` and its flip."""
    mid = grid.times[:-1] + 0.5 * grid.dt - grid.t_start
    sign = delta_n(mid, n, grid.t_end - grid.t_start)
    aligned = np.where(sign > 0, 1, -1)
    return [sample_control(band, grid, BangBang(tuple(int(v) for v in aligned))),
            sample_control(band, grid, BangBang(tuple(int(-v) for v in aligned)))]


@dataclass(frozen=True)
class DeltaNormReport:
    n: int
    estimate: float
    c0: float
    C0: float
    eta_l1: float
    lower_envelope: float
    upper_envelope: float
    argmax: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def delta_n_norm(eta, band: VolatilityBand, grid: TimeGrid, n: int, control_family: Sequence | None = None,
                 n_mc: int = 2, seed: int = 0) -> DeltaNormReport:
    """Max over controls of the mean of ``int delta_n <eta, d<B>>``.

    ``eta`` is a symmetric matrix process: constant, ``(n_steps, d, d)``
    array or callable ``(t, B) -> (S, d, d)``.  The family defaults to the
    aligned bang-bang control, its flip and the two endpoint constants.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    d = band.dim
    family = list(control_family) if control_family is not None else (
        aligned_controls(band, grid, n)
        + [sample_control(band, grid, Fixed(band.sigma_lower)), sample_control(band, grid, Fixed(band.sigma_upper))]
    )
    mid = grid.times[:-1] + 0.5 * grid.dt - grid.t_start
    weight = delta_n(mid, n, grid.t_end - grid.t_start)
    means, l1 = [], []
    for c, control in enumerate(family):
        ens = simulate_batch([control] * n_mc, band, grid, seed, c * n_mc + np.arange(n_mc))
        stat = np.zeros(n_mc)
        norm = np.zeros(n_mc)
        for k in range(grid.n_steps):
            e = _process(eta, ens, k, (d, d))
            stat += weight[k] * np.einsum("sij,sij->s", e, ens.qv_increments[:, k])
            norm += np.linalg.norm(e, axis=(1, 2)) * grid.dt
        means.append(stat.mean())
        l1.append(norm.mean())
    half_width = 0.5 * (band.upper_sq - band.lower_sq)
    c0 = float(np.linalg.eigvalsh(half_width)[0])
    C0 = float(np.linalg.norm(half_width))
    eta_l1 = float(max(l1))
    best = int(np.argmax(means))
    return DeltaNormReport(n, float(means[best]), c0, C0, eta_l1, c0 * eta_l1, C0 * eta_l1, best)


@dataclass(frozen=True)
class DecompositionVerdict:
    verdict: str
    max_abs_x: float
    witness: dict | None = None
    delta_norms: dict = field(default_factory=dict)
    qv_martingale: float = 0.0

    @property
    def all_zero(self) -> bool:
        return self.verdict == "all_zero"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def decomposition_check(xi, eta, zeta, band: VolatilityBand, grid: TimeGrid,
                        control_family: Sequence, n_mc: int, tol: float, seed: int = 0,
                        ns: Sequence[int] = (8, 16, 32, 64)) -> DecompositionVerdict:
    """Decide whether the Ito integral of ``(xi, eta, zeta)`` vanishes
    identically across the control family.

    A nonzero node value is reported as a witness.  Otherwise the delta_n
    norms of each component of ``eta`` and the quadratic variation of the
    martingale part must also fall below ``tol``.
    """
    d = band.dim
    worst = (0.0, None)
    qv_mart = 0.0
    for c, control in enumerate(control_family):
        ens = simulate_batch([control] * n_mc, band, grid, seed, c * n_mc + np.arange(n_mc))
        X = integrate_ito(xi, eta, zeta, ens)
        mag = np.abs(X).max(axis=2)
        s, k = np.unravel_index(int(mag.argmax()), mag.shape)
        if mag[s, k] > worst[0] or worst[1] is None:
            worst = (float(mag[s, k]), {"control": c, "scenario": int(ens.indices[s]), "step": int(k),
                                        "t": float(grid.times[k]), "X": X[s, k].tolist()})
        q = np.zeros(n_mc)
        for j in range(grid.n_steps):
            z = _process(zeta, ens, j, (d, d))
            q += np.einsum("sci,sij,scj->s", z, ens.qv_increments[:, j], z)
        qv_mart = max(qv_mart, float(q.max()))
    if worst[0] > tol:
        return DecompositionVerdict("violated", worst[0], worst[1], qv_martingale=qv_mart)
    norms = {}
    for n in ns:
        for comp in range(d):
            comp_eta = _component(eta, comp, d)
            est = max(abs(delta_n_norm(comp_eta, band, grid, n, control_family, n_mc, seed).estimate),
                      abs(delta_n_norm(_neg(comp_eta), band, grid, n, control_family, n_mc, seed).estimate))
            norms[f"n={n},c={comp + 1}"] = est
    if max(norms.values(), default=0.0) > tol or qv_mart > tol:
        return DecompositionVerdict("violated", worst[0], worst[1], norms, qv_mart)
    return DecompositionVerdict("all_zero", worst[0], None, norms, qv_mart)


def _neg(p):
    if callable(p):
        return lambda t, b: -np.asarray(p(t, b), dtype=float)
    return -np.asarray(p, dtype=float)


def _component(eta, comp: int, d: int):
    """The symmetric-matrix process multiplying ``d<B>`` in component ``comp``."""
    if callable(eta):
        return lambda t, b: np.broadcast_to(np.asarray(eta(t, b), dtype=float),
                                            (b.shape[0], d, d, d))[..., comp]
    arr = np.asarray(eta, dtype=float)
    if arr.ndim == 0:
        return np.full((d, d), float(arr))
    return arr[..., comp]
