"""Config-driven command line front end.

    gcalc gheat|simulate|verify|example --config <path> [--out <dir>] [--seed <u64>]

Exit codes: 0 success (for ``verify``: all thresholds met), 2 ``verify``
falsified the configured value function, 1 any error.  The config schema
is documented in the README.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gcalc import exprdsl, gheat, harmonic, pathcheck
from gcalc.functional import FunctionalSpec
from gcalc.gcore import VolatilityBand
from gcalc.io import write_csv, write_json
from gcalc.scenario import (
    CoefficientSet,
    Fixed,
    TimeGrid,
    estimate_upper_expectation,
    euler_gsde,
    path_rows,
    sample_control,
    simulate_batch,
)

COMMANDS = ("gheat", "simulate", "verify", "example")
U64 = 2 ** 64
# rounding floor of the Richardson-extrapolated second differences
PDE_TOL = {"analytic": 1e-8, "finite_difference": 1e-6}
DEFAULT_PROFILE = {"x_min": -400.0, "x_max": 400.0, "dx": 0.01}
HARMONIC_MODES = ("harmonic", "example4.1")
DEFAULT_THRESHOLDS = {"pde": None, "slope_min": 0.4, "pathwise_max": None, "pathwise_zero": 1e-12}


class ConfigError(ValueError):
    pass


# --- config helpers ---------------------------------------------------------

def _need(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing '{key}' in {where}")
    return block[key]


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def band_from(cfg: dict) -> VolatilityBand:
    block = _need(cfg, "band", "config")
    lo = np.asarray(_need(block, "sigma_lower", "band"), dtype=float)
    up = np.asarray(_need(block, "sigma_upper", "band"), dtype=float)
    d = int(block.get("d", 1 if lo.ndim == 0 else lo.shape[0]))
    if lo.ndim == 0 and d > 1:
        lo = lo * np.eye(d)
    if up.ndim == 0 and d > 1:
        up = up * np.eye(d)
    if lo.shape != up.shape:
        raise ConfigError("band matrices disagree in shape")
    if np.array_equal(lo, up):
        band = VolatilityBand.singleton(lo)
    else:
        band = VolatilityBand(lo, up)
    if band.dim != d:
        raise ConfigError(f"band dimension {band.dim} does not match d={d}")
    return band


def variables(d: int) -> tuple:
    return ("t", "x") if d == 1 else ("t",) + tuple(f"x{i + 1}" for i in range(d))


def compile_scalar(src, d: int) -> Callable:
    """``(t, x[S, d]) -> (S,)`` from an expression string or a number."""
    expr = exprdsl.parse(src, variables(d))

    def fn(t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.asarray(expr(t, *x.T), dtype=float), (x.shape[0],))
    return fn


def _shaped(src, shape: tuple, where: str):
    """Nested expression lists of the given shape; a bare scalar is allowed
    when every axis has length one."""
    arr = np.empty(shape, dtype=object)
    if not isinstance(src, list):
        if arr.size != 1:
            raise ConfigError(f"{where} needs shape {list(shape)}")
        arr.reshape(-1)[0] = src
        return arr
    try:
        probe = np.array(src, dtype=object)
    except ValueError as err:
        raise ConfigError(f"{where} is ragged") from err
    if probe.shape != shape:
        raise ConfigError(f"{where} has shape {list(probe.shape)}, expected {list(shape)}")
    return probe


def compile_array(src, shape: tuple, d: int, where: str) -> Callable:
    """``(t, x[S, d]) -> (S, *shape)`` from nested expressions."""
    cells = _shaped(src, shape, where)
    fns = [compile_scalar(c, d) for c in cells.reshape(-1)]

    def fn(t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        vals = np.stack([f(t, x) for f in fns], axis=-1)
        return vals.reshape((x.shape[0],) + shape)
    return fn


def coefficients_from(block: dict, d: int) -> CoefficientSet:
    b = compile_array(block.get("b", [0] * d if d > 1 else 0), (d,), d, "coefficients.b")
    h = compile_array(block.get("h", np.zeros((d, d, d)).tolist() if d > 1 else 0), (d, d, d), d,
                      "coefficients.h")
    s = compile_array(_need(block, "sigma", "coefficients"), (d, d), d, "coefficients.sigma")
    return CoefficientSet(d, b, h, s, block.get("lipschitz_K"))


def functional_from(block: dict, d: int) -> FunctionalSpec:
    f = compile_array(_need(block, "f", "functional"), (d, d), d, "functional.f")
    g = compile_array(_need(block, "g", "functional"), (d,), d, "functional.g")
    return FunctionalSpec(float(block.get("alpha", 1.0)), float(block.get("beta", 1.0)), f, g, d)


def value_function_from(block: dict, d: int) -> pathcheck.ValueFunction:
    mode = block.get("mode", "expressions")
    if mode == "constant":
        return pathcheck.ValueFunction.constant(float(block.get("c", 0.0)), d)
    if mode != "expressions":
        raise ConfigError(f"unknown value_function mode '{mode}'")
    V = compile_scalar(_need(block, "V", "value_function"), d)
    dv = compile_scalar(block["dV_dt"], d) if "dV_dt" in block else None
    grad = compile_array(block["grad"], (d,), d, "value_function.grad") if "grad" in block else None
    hess = compile_array(block["hessian"], (d, d), d, "value_function.hessian") if "hessian" in block else None
    return pathcheck.ValueFunction(V, d, dv, grad, hess)


def _time_fn(src) -> Callable:
    expr = exprdsl.parse(src, ("t",))
    return lambda t: expr(t)


def _x_fn(src) -> Callable:
    expr = exprdsl.parse(src, ("x",))
    return lambda x: expr(x)


def profile_grid(block: dict) -> np.ndarray:
    p = {**DEFAULT_PROFILE, **block.get("profile", {})}
    dx = float(p["dx"])
    lo, hi = round(float(p["x_min"]) / dx), round(float(p["x_max"]) / dx)
    if not lo < 0 < hi:
        raise ConfigError("profile range must contain 0 in its interior")
    return np.arange(lo, hi + 1) * dx


def example_from(block: dict, band: VolatilityBand) -> harmonic.ExampleSetup:
    h = _x_fn(block.get("h", "x"))
    sigma = _x_fn(block.get("sigma", "1"))
    profile = harmonic.build_v0(h, sigma, profile_grid(block), float(block.get("V0_at_0", 0.0)),
                                float(block.get("V0prime_at_0", 1.0)))
    b = compile_scalar(block.get("b", "0"), 1)
    return harmonic.build_example_spec(
        profile, _time_fn(block.get("phi", "exp(t)")), _time_fn(block.get("phi_prime", "exp(t)")),
        lambda t, x: b(t, np.asarray(x)[:, None]), band)


@dataclass
class Problem:
    band: VolatilityBand
    coeffs: CoefficientSet
    spec: FunctionalSpec
    V: pathcheck.ValueFunction
    perturbation: dict


def perturbed(spec: FunctionalSpec, V: pathcheck.ValueFunction, pert: dict):
    df, dg, dv = (float(pert.get(k, 0.0)) for k in ("f", "g", "v_drift"))
    if df:
        f0 = spec.f
        spec = FunctionalSpec(spec.alpha, spec.beta, lambda t, x: np.asarray(f0(t, x)) + df, spec.g, spec.dim)
    if dg:
        g0 = spec.g
        spec = FunctionalSpec(spec.alpha, spec.beta, spec.f, lambda t, x: np.asarray(g0(t, x)) + dg, spec.dim)
    if dv:
        V = V.with_drift(dv)
    return spec, V


def problem_from(cfg: dict) -> Problem:
    band = band_from(cfg)
    d = band.dim
    vf = _need(cfg, "value_function", "config")
    if vf.get("mode") in HARMONIC_MODES:
        ex = example_from(vf, band)
        coeffs, spec, V = ex.coeffs, ex.spec, ex.V
    else:
        coeffs = coefficients_from(_need(cfg, "coefficients", "config"), d)
        spec = functional_from(_need(cfg, "functional", "config"), d)
        V = value_function_from(vf, d)
    pert = cfg.get("perturbation", {})
    spec, V = perturbed(spec, V, pert)
    return Problem(band, coeffs, spec, V, pert)


def _axis(block, default: dict) -> np.ndarray:
    if isinstance(block, list):
        return np.asarray(block, dtype=float)
    b = {**default, **(block or {})}
    return np.linspace(float(b["min"]), float(b["max"]), int(b["n"]))


# --- commands ---------------------------------------------------------------

def cmd_gheat(cfg: dict, out: Path, seed: int) -> int:
    band = band_from(cfg)
    if band.dim != 1:
        raise ConfigError("gheat supports d = 1 only")
    block = _need(cfg, "gheat", "config")
    T = float(block.get("T", 1.0))
    x0 = float(block.get("x0", 0.0))
    g = block.get("grid")
    if g is None:
        grid = gheat.auto_grid(band, T, x0, boundary=block.get("boundary", "extrapolate_linear"))
    else:
        probe = gheat.Grid1D(float(g["x_min"]), float(g["x_max"]), int(g["nx"]), 1.0,
                             g.get("boundary", "extrapolate_linear"))
        dt = float(g["dt"]) if g.get("dt") is not None else probe.max_dt(band)
        grid = gheat.Grid1D(probe.x_min, probe.x_max, probe.nx, dt, probe.boundary)
    cfl = grid.max_dt(band)
    save_every = block.get("save_every")
    if "cylinder" in block:
        cyl = block["cylinder"]
        times = tuple(float(t) for t in _need(cyl, "times", "gheat.cylinder"))
        names = tuple(f"x{i + 1}" for i in range(len(times)))
        expr = exprdsl.parse(_need(cyl, "phi", "gheat.cylinder"), names)
        xi = gheat.CylinderFunctional(times, lambda *a: expr(*a))
        terminal, horizon = gheat.cylinder_terminal(xi, band, grid), times[0]
        phi_src = cyl["phi"]
    else:
        expr = exprdsl.parse(_need(block, "phi", "gheat"), ("x",))
        terminal, horizon = (lambda x: expr(x)), T
        phi_src = block["phi"]
    surf = gheat.solve_terminal(terminal, band, grid, horizon, save_every=save_every)
    value = float(gheat.interpolate(grid, surf.values[0], x0))
    header, rows = surf.rows()
    write_csv(out / "surface.csv", header, rows)
    write_json(out / "summary.json", {
        "value_at_origin": value,
        "x0": x0,
        "T": horizon if "cylinder" not in block else list(times),
        "phi": phi_src,
        "band": band.to_dict(),
        "grid": grid.to_dict(),
        "cfl_dt": cfl,
        "n_steps": math.ceil(horizon / grid.dt - 1e-12),
    })
    return 0


def cmd_simulate(cfg: dict, out: Path, seed: int) -> int:
    band = band_from(cfg)
    d = band.dim
    block = _need(cfg, "simulate", "config")
    grid = TimeGrid(float(block.get("t_start", 0.0)), float(block.get("T", 1.0)), int(block.get("n_steps", 16)))
    n_mc = int(block.get("n_mc", 10_000))
    payoff_fn = compile_scalar(block.get("payoff", "x^2" if d == 1 else "x1^2"), d)
    coeffs = coefficients_from(cfg["coefficients"], d) if "coefficients" in cfg else None
    x0 = np.broadcast_to(np.asarray(block.get("x0", 0.0), dtype=float), (d,)).copy()
    controls = None
    if block.get("controls", "default") == "endpoints":
        controls = [sample_control(band, grid, Fixed(band.sigma_lower)),
                    sample_control(band, grid, Fixed(band.sigma_upper))]
    elif block.get("controls", "default") != "default":
        raise ConfigError("simulate.controls must be 'default' or 'endpoints'")
    n_controls = int(block.get("n_controls", 8))

    def payoff(x):
        return payoff_fn(grid.t_end, x)

    est = estimate_upper_expectation(payoff, band, grid, n_controls, n_mc, seed, coeffs,
                                     x0 if coeffs is not None else None, controls)
    result = {
        **est.to_dict(),
        "payoff": block.get("payoff", "x^2" if d == 1 else "x1^2"),
        "state": "X" if coeffs is not None else "B",
        "n_controls": len(est.controls),
        "n_mc_per_control": n_mc,
        "grid": {"t_start": grid.t_start, "t_end": grid.t_end, "n_steps": grid.n_steps},
        "band": band.to_dict(),
        "seed": seed,
    }
    if block.get("dump_paths", False):
        cap = int(block.get("max_rows", 100_000))
        n_paths = max(0, min(n_mc, cap // (grid.n_steps + 1)))
        idx = est.argmax * n_mc + np.arange(n_paths)
        ens = simulate_batch([est.controls[est.argmax]] * n_paths, band, grid, seed, idx)
        if coeffs is not None:
            ens = euler_gsde(coeffs, x0, ens)
        header, rows = None, []
        for s, p in enumerate(ens.paths()):
            header, prow = path_rows(p)
            rows.extend([s] + r for r in prow)
        write_csv(out / "paths.csv", ["scenario"] + (header or ["k", "t"]), rows)
        result["paths_dumped"] = n_paths
        result["paths_truncated"] = n_paths < n_mc
    write_json(out / "estimate.json", result)
    return 0


def _dt_list(block: dict) -> list:
    if "dt_list" in block:
        return [float(v) for v in block["dt_list"]]
    lo, hi = block.get("dt_exponents", [6, 10])
    return [2.0 ** -k for k in range(int(lo), int(hi) + 1)]


def verify_report(cfg: dict, seed: int) -> tuple[dict, int]:
    prob = problem_from(cfg)
    block = cfg.get("verify", {})
    t0, t1 = float(block.get("t_start", 0.0)), float(block.get("t_end", 1.0))
    d = prob.band.dim
    grid_cfg = block.get("pde_grid", {})
    t_axis = _axis(grid_cfg.get("t"), {"min": t0, "max": t1, "n": 11})
    x_axes = [_axis(grid_cfg.get("x"), {"min": -2.0, "max": 2.0, "n": 401 if d == 1 else 21})] * d
    pde = pathcheck.pde_residuals(prob.V, prob.coeffs, prob.spec, prob.band,
                                  pathcheck.product_grid(t_axis, x_axes))
    dts = _dt_list(block)
    n_scen = int(block.get("n_scenarios", 256))
    x0 = np.broadcast_to(np.asarray(block.get("x0", 0.0), dtype=float), (d,)).copy()
    levels = pathcheck.refined_ensembles(prob.band, dts, t0, t1, n_scen, seed)
    reports = [pathcheck.pathwise_residual(prob.V, prob.coeffs, prob.spec, prob.band,
                                           euler_gsde(prob.coeffs, x0, ens)) for ens in levels]
    maxima = np.array([r.ensemble_max for r in reports])
    slope, degenerate = pathcheck.fit_slope(dts, maxima)
    conv = pathcheck.ConvergenceReport(np.asarray(dts), maxima,
                                       np.array([r.ensemble_mean for r in reports]), slope, degenerate)
    thr = {**DEFAULT_THRESHOLDS, **block.get("thresholds", {})}
    if thr["pde"] is None:
        thr["pde"] = PDE_TOL[prob.V.mode]
    # residuals at rounding level carry no slope information
    all_zero = bool(np.all(maxima <= float(thr["pathwise_zero"])))
    checks = {"pde": bool(pde.max <= float(thr["pde"]))}
    flags = []
    if all_zero:
        checks["slope"] = True
    else:
        checks["slope"] = bool(not degenerate and slope >= float(thr["slope_min"]))
        if not checks["slope"]:
            flags.append("pathwise plateau")
    if thr.get("pathwise_max") is not None:
        checks["pathwise_max"] = bool(maxima[-1] <= float(thr["pathwise_max"]))
    if not checks["pde"]:
        flags.append("pde residual")
    if pde.lower_bound_only:
        flags.append("G lower bound only")
    passed = all(checks.values())
    report = {
        "verdict": "pass" if passed else "falsified",
        "exit_code": 0 if passed else 2,
        "flags": flags,
        "checks": checks,
        "thresholds": thr,
        "pde_residuals": pde.to_dict(),
        "pathwise_residual": reports[-1].to_dict(),
        "convergence": conv.to_dict(),
        "n_scenarios": n_scen,
        "seed": seed,
        "perturbation": prob.perturbation,
        "value_function_mode": cfg["value_function"].get("mode", "expressions"),
        "derivatives": prob.V.mode,
    }
    return report, report["exit_code"]


def cmd_verify(cfg: dict, out: Path, seed: int) -> int:
    report, code = verify_report(cfg, seed)
    write_json(out / "verify.json", report)
    return code


def cmd_example(cfg: dict, out: Path, seed: int) -> int:
    band = band_from(cfg)
    vf = copy.deepcopy(cfg.get("value_function", {"mode": "harmonic"}))
    if vf.get("mode", "harmonic") not in HARMONIC_MODES:
        raise ConfigError("example needs a value_function block with mode 'harmonic'")
    vf["mode"] = "harmonic"
    ex = example_from(vf, band)
    p = ex.profile
    header, rows = p.rows()
    write_csv(out / "profile.csv", header, rows)
    h, sigma = _x_fn(vf.get("h", "x")), _x_fn(vf.get("sigma", "1"))
    rise = float(p.value(1.0) - p.value(0.0)) if p.x_grid[-1] >= 1.0 else None
    write_json(out / "spec.json", {
        "alpha": ex.spec.alpha,
        "beta": ex.spec.beta,
        "f": "1/2 G^-1(phi'(t) V0(x) + b(t,x) phi(t) V0'(x))",
        "g": "sigma(x) phi(t) V0'(x)",
        "V": "phi(t) V0(x)",
        "coefficients": {"b": vf.get("b", "0"), "h": vf.get("h", "x"), "sigma": vf.get("sigma", "1")},
        "phi": vf.get("phi", "exp(t)"),
        "phi_prime": vf.get("phi_prime", "exp(t)"),
        "V0_at_0": p.V0_at_0,
        "V0prime_at_0": p.V0prime_at_0,
        "profile": {"x_min": float(p.x_grid[0]), "x_max": float(p.x_grid[-1]),
                    "n": int(p.x_grid.size), "rise_0_to_1": rise,
                    "harmonic_residual": harmonic.check_harmonic(p, h, sigma)},
        "band": band.to_dict(),
    })
    verify_cfg = {
        "band": cfg["band"],
        "value_function": vf,
        "perturbation": cfg.get("perturbation", {"f": 0.0, "g": 0.0, "v_drift": 0.0}),
        "verify": {"t_start": 0.0, "t_end": 1.0, "x0": 0.0, "n_scenarios": 256,
                   "dt_exponents": [6, 10], "thresholds": dict(DEFAULT_THRESHOLDS),
                   **cfg.get("verify", {})},
        "seed": seed,
    }
    write_json(out / "verify_config.json", verify_cfg)
    return 0


HANDLERS = {"gheat": cmd_gheat, "simulate": cmd_simulate, "verify": cmd_verify, "example": cmd_example}


# --- entry point ------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from err
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcalc", description="G-expectation experiments from JSON configs.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="path to the JSON experiment config")
    ap.add_argument("--out", help="output directory (default: config 'output_dir' or ./gcalc_out)")
    ap.add_argument("--seed", type=_u64, help="u64 seed overriding the config's 'seed'")
    return ap


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are errors, never a spurious 2
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if not 0 <= seed < U64:
            raise ConfigError("seed must lie in [0, 2^64)")
        out = Path(args.out or cfg.get("output_dir", "gcalc_out"))
        return HANDLERS[args.command](cfg, out, seed)
    except Exception as err:  # every failure maps to exit 1
        print(f"gcalc {args.command}: error: {err}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
