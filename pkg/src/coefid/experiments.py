"""
Experiment configuration, built-in presets and the run orchestration behind the CLI.

A configuration is a YAML mapping; every key is optional and falls back to
the defaults in ``DEFAULTS`` (the trapezoid test problem).  See
``docs/config.md`` for the schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import sympy
import yaml

from . import __version__
from .direct import CoefficientFunction, TimeGrid, record_observations, run_direct, subsample, write_series_csv, write_trajectory_csv
from .errors import InvalidInputError
from .fem import PointEval, ProblemSpec, WeightedIntegral, assemble, build_observation
from .inverse import SchemeKind, identify, solve_nonlinear_implicit, solve_via_transform
from .mesh import PolygonSpec, triangulate

log = logging.getLogger(__name__)

TRAPEZOID_VERTICES = [[0.0, 0.0], [0.0, 1.0], [1.5, 0.5], [1.5, 0.0]]
# 1154 nodes / 2171 triangles on the trapezoid
DEFAULT_EDGE_LENGTH = 0.034

METHODS = [s.value for s in SchemeKind] + ["transform", "nonlinear_implicit"]

DEFAULTS: dict[str, Any] = {
    "name": "custom",
    "domain": {"vertices": TRAPEZOID_VERTICES, "edge_length": DEFAULT_EDGE_LENGTH},
    "problem": {"k": 1.0, "g": 10.0, "f": 0.0, "u0": 1.0},
    "coefficient": {"kind": "ramp_step"},
    "time": {"T": 0.1, "N_data": 1000, "data_scheme": "implicit", "data_grid": "fine", "N_inverse": [100, 250, 500]},
    "schemes": ["first_order"],
    "p0": "linear",
    "observation": {"kind": "point", "x_star": None, "omega": None},
    "noise": {"level": 0.0, "seed": 0},
    "analysis": {"error_windows": [[0.0, 1.0]], "sign_window": [0.45, 0.6]},
    "output": {"field": False},
}

_RAMP_WINDOWS = [[0.05, 0.45], [0.55, 1.0]]

PRESETS: dict[str, dict[str, Any]] = {
    "fig2": {
        "name": "fig2",
        "mode": "direct",
        "time": {"N_direct": [100, 250, 500, 1000]},
    },
    "fig4": {
        "name": "fig4",
        "schemes": ["first_order"],
        "analysis": {"error_windows": _RAMP_WINDOWS},
    },
    "fig5": {
        "name": "fig5",
        "schemes": ["crank_nicolson"],
        "analysis": {"error_windows": _RAMP_WINDOWS},
    },
    "fig6": {
        "name": "fig6",
        "coefficient": {"kind": "smooth_rational"},
        "time": {"N_data": 4000, "data_scheme": "crank_nicolson", "N_inverse": [125, 250, 500]},
        "schemes": ["first_order"],
        "analysis": {"error_windows": [[0.2, 1.0]]},
    },
    "fig7": {
        "name": "fig7",
        "coefficient": {"kind": "smooth_rational"},
        "time": {"N_data": 4000, "data_scheme": "crank_nicolson", "N_inverse": [125, 250, 500]},
        "schemes": ["crank_nicolson"],
        "analysis": {"error_windows": [[0.2, 1.0]]},
    },
    "convergence_table": {
        "name": "convergence_table",
        "coefficient": {"kind": "smooth_rational"},
        "time": {"N_data": 4000, "data_scheme": "crank_nicolson", "N_inverse": [125, 250, 500, 1000]},
        "schemes": ["first_order", "crank_nicolson", "hybrid"],
        "analysis": {"error_windows": [[0.2, 1.0]]},
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ConfigError(InvalidInputError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- expressions ----------------------------------------------------------------

_SYMBOLS = {name: sympy.Symbol(name) for name in ("x", "y", "t")}


def _expression(value, path, allow_t=False):
    """Number -> constant; string -> vectorised callable of points (and time)."""
    if isinstance(value, bool):
        raise ConfigError(path, "expected a number or an expression")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(path, "expected a number or an expression")
    try:
        expr = sympy.sympify(value, locals=_SYMBOLS)
    except (sympy.SympifyError, TypeError, SyntaxError) as exc:
        raise ConfigError(path, f"cannot parse expression {value!r}") from exc
    allowed = {_SYMBOLS["x"], _SYMBOLS["y"]} | ({_SYMBOLS["t"]} if allow_t else set())
    unknown = expr.free_symbols - allowed
    if unknown:
        raise ConfigError(path, f"unresolved names {sorted(map(str, unknown))}")
    if not expr.free_symbols:
        return float(expr)
    fn = sympy.lambdify((_SYMBOLS["x"], _SYMBOLS["y"], _SYMBOLS["t"]), expr, "numpy")
    if allow_t:
        return lambda p, t: fn(p[:, 0], p[:, 1], t)
    return lambda p: fn(p[:, 0], p[:, 1], 0.0)


# -- validated configuration --------------------------------------------------


@dataclass
class ExperimentConfig:
    raw: dict
    polygon: PolygonSpec
    edge_length: float
    spec: ProblemSpec
    p_exact: CoefficientFunction
    T: float
    N_data: int
    data_scheme: str
    data_grid: str
    N_inverse: list
    N_direct: list
    schemes: list
    p0: Any
    observation: Any
    noise_level: float
    seed: int
    error_windows: list
    sign_window: list
    mode: str
    write_field: bool

    @property
    def name(self) -> str:
        return self.raw["name"]


def _num(d, key, path, positive=False):
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{path}.{key}", "expected a finite number")
    if positive and v <= 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return float(v)


def _int_list(v, path):
    if isinstance(v, int) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a non-empty list of integers")
    for i, n in enumerate(v):
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise ConfigError(f"{path}[{i}]", "expected a positive integer")
    return list(v)


def _coefficient(c, T):
    kind = c.get("kind")
    if kind == "ramp_step":
        return CoefficientFunction.ramp_step(T)
    if kind == "smooth_rational":
        return CoefficientFunction.smooth_rational()
    if kind == "zero":
        return CoefficientFunction.zero()
    if kind == "table":
        tab = c.get("table") or {}
        try:
            return CoefficientFunction.from_table(tab.get("times"), tab.get("values"), tab.get("rule", "linear"))
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise ConfigError("coefficient.table", str(exc)) from exc
    raise ConfigError("coefficient.kind", f"unknown coefficient {kind!r}; expected ramp_step, smooth_rational, zero or table")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a (partial) configuration mapping; errors name the field path."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    unknown = set(cfg) - set(DEFAULTS) - {"mode"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")

    dom = cfg["domain"]
    try:
        polygon = PolygonSpec(dom.get("vertices"))
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise ConfigError("domain.vertices", str(exc)) from exc
    h = _num(dom, "edge_length", "domain", positive=True)

    pr = cfg["problem"]
    spec = ProblemSpec(
        diffusion=_expression(pr.get("k"), "problem.k"),
        boundary_coeff=_expression(pr.get("g"), "problem.g"),
        source=_expression(pr.get("f"), "problem.f", allow_t=True),
        initial=_expression(pr.get("u0"), "problem.u0"),
    )

    tm = cfg["time"]
    T = _num(tm, "T", "time", positive=True)
    N_data = _int_list(tm.get("N_data"), "time.N_data")
    if len(N_data) != 1:
        raise ConfigError("time.N_data", "expected a single integer")
    N_data = N_data[0]
    N_inverse = _int_list(tm.get("N_inverse"), "time.N_inverse")
    N_direct = _int_list(tm.get("N_direct", [N_data]), "time.N_direct")
    data_scheme = tm.get("data_scheme")
    if data_scheme not in ("implicit", "crank_nicolson"):
        raise ConfigError("time.data_scheme", "expected implicit or crank_nicolson")
    data_grid = tm.get("data_grid")
    if data_grid not in ("fine", "matched"):
        raise ConfigError("time.data_grid", "expected fine or matched")
    if data_grid == "fine":
        for i, n in enumerate(N_inverse):
            if N_data % n:
                raise ConfigError(f"time.N_inverse[{i}]", f"N_data={N_data} is not divisible by {n}")

    schemes = cfg["schemes"]
    if isinstance(schemes, str):
        schemes = [schemes]
    if not isinstance(schemes, list) or not schemes:
        raise ConfigError("schemes", "expected a non-empty list")
    for i, s in enumerate(schemes):
        if s not in METHODS:
            raise ConfigError(f"schemes[{i}]", f"unknown scheme {s!r}; expected one of {METHODS}")

    p0 = cfg["p0"]
    if isinstance(p0, bool) or not (
        isinstance(p0, (int, float)) or p0 in ("linear", "compatibility", "first_order", "extrapolated", "exact")
    ):
        raise ConfigError("p0", "expected a number or linear|compatibility|first_order|extrapolated|exact")

    ob = cfg["observation"]
    if ob.get("kind") == "point":
        xs = ob.get("x_star")
        if xs is None:
            xs = polygon.centroid
        try:
            xs = tuple(float(v) for v in xs)
            if len(xs) != 2:
                raise ValueError
        except (TypeError, ValueError):
            raise ConfigError("observation.x_star", "expected two coordinates") from None
        if polygon.inward_distance([xs])[0] <= 0:
            raise ConfigError("observation.x_star", "point is not strictly inside the domain")
        observation = PointEval(xs)
    elif ob.get("kind") == "integral":
        om = ob.get("omega")
        observation = WeightedIntegral(None if om is None else _expression(om, "observation.omega"))
    else:
        raise ConfigError("observation.kind", "expected point or integral")

    nz = cfg["noise"]
    level = _num(nz, "level", "noise")
    if level < 0:
        raise ConfigError("noise.level", "must be nonnegative")
    seed = nz.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("noise.seed", "expected a nonnegative integer")

    an = cfg["analysis"]
    windows = an.get("error_windows")
    try:
        windows = [[float(a), float(b)] for a, b in windows]
        sign_window = [float(v) for v in an.get("sign_window")]
        assert len(sign_window) == 2
    except (TypeError, ValueError, AssertionError):
        raise ConfigError("analysis", "windows must be pairs of fractions of T") from None

    mode = cfg.get("mode", "inverse")
    if mode not in ("inverse", "direct"):
        raise ConfigError("mode", "expected inverse or direct")

    return ExperimentConfig(
        raw=cfg,
        polygon=polygon,
        edge_length=h,
        spec=spec,
        p_exact=_coefficient(cfg["coefficient"], T),
        T=T,
        N_data=N_data,
        data_scheme=data_scheme,
        data_grid=data_grid,
        N_inverse=N_inverse,
        N_direct=N_direct,
        schemes=list(schemes),
        p0=p0,
        observation=observation,
        noise_level=level,
        seed=seed,
        error_windows=windows,
        sign_window=sign_window,
        mode=mode,
        write_field=bool(cfg["output"].get("field", False)),
    )


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    return parse_config(raw or {})


def preset_config(name: str, overrides: dict | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return parse_config(_merge(PRESETS[name], overrides or {}))


# -- analysis helpers ------------------------------------------------------------


def window_mask(times, T, windows):
    m = np.zeros(len(times), dtype=bool)
    for a, b in windows:
        m |= (times >= a * T - 1e-12 * T) & (times <= b * T + 1e-12 * T)
    return m


def max_error(times, err, T, windows) -> float:
    m = window_mask(times, T, windows)
    return float(np.max(np.abs(err[m]))) if m.any() else float("nan")


def sign_changes(values) -> int:
    s = np.sign(values)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def observed_orders(errors) -> list:
    """``log2(e_k / e_{k+1})`` for successive halvings of tau; first entry empty."""
    tiny = np.finfo(float).tiny
    out = [float("nan")]
    for a, b in zip(errors[:-1], errors[1:]):
        out.append(math.log2(max(a, tiny) / max(b, tiny)))
    return out


# -- running -------------------------------------------------------------------------


def _fmt(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunContext:
    cfg: ExperimentConfig
    mesh: Any
    forms: Any
    obs: Any


def _context(cfg: ExperimentConfig) -> RunContext:
    mesh = triangulate(cfg.polygon, cfg.edge_length)
    forms = assemble(mesh, cfg.spec)
    obs = build_observation(mesh, cfg.observation)
    log.info("mesh: %d nodes, %d triangles", mesh.n_nodes, mesh.n_triangles)
    return RunContext(cfg, mesh, forms, obs)


def _observe(ctx, N, scheme):
    cfg = ctx.cfg
    traj = run_direct(ctx.mesh, cfg.spec, cfg.p_exact, TimeGrid(cfg.T, N), scheme, forms=ctx.forms)
    phi = record_observations(traj, ctx.obs, cfg.noise_level, cfg.seed)
    return traj, phi


def _inverse_run(ctx, method, N, phi):
    cfg = ctx.cfg
    grid = TimeGrid(cfg.T, N)
    if method == "transform":
        return solve_via_transform(ctx.mesh, cfg.spec, grid, ctx.obs, phi, forms=ctx.forms)[1]
    if method == "nonlinear_implicit":
        return solve_nonlinear_implicit(ctx.mesh, cfg.spec, grid, ctx.obs, phi, forms=ctx.forms)
    p0 = float(cfg.p_exact(0.0)) if cfg.p0 == "exact" else cfg.p0
    return identify(ctx.mesh, cfg.spec, grid, method, ctx.obs, phi, p_0=p0, forms=ctx.forms)


def _matched_data_scheme(method):
    return "crank_nicolson" if method == "crank_nicolson" else "implicit"


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Execute ``cfg`` and write its CSV outputs plus ``manifest.json`` into ``out_dir``.

    Numerical failures propagate after the outputs of completed runs are
    written; nothing non-finite is ever written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _context(cfg)
    files: list[Path] = []
    summary: dict[str, Any] = {"mesh": {"nodes": ctx.mesh.n_nodes, "triangles": ctx.mesh.n_triangles}}
    failure = None

    if cfg.mode == "direct":
        rows = []
        for N in cfg.N_direct:
            traj, phi = _observe(ctx, N, cfg.data_scheme)
            f = out / f"observation_N{N}.csv"
            write_series_csv(f, traj.time_grid.times, phi)
            files.append(f)
            if cfg.write_field:
                f = out / f"field_N{N}.csv"
                write_trajectory_csv(f, traj)
                files.append(f)
            rows.append([N, float(phi[0]), float(phi[-1]), int(np.all(np.diff(phi) <= 1e-12))])
        f = out / "summary.csv"
        _write_rows(f, ["N", "phi_start", "phi_end", "nonincreasing"], rows)
        files.append(f)
    else:
        fine_phi = None
        if cfg.data_grid == "fine":
            traj, fine_phi = _observe(ctx, cfg.N_data, cfg.data_scheme)
            f = out / "observations.csv"
            write_series_csv(f, traj.time_grid.times, fine_phi)
            files.append(f)
            if not np.all(np.isfinite(fine_phi)):
                raise InvalidInputError("synthetic observations are not finite")

        jobs = [(m, N) for m in cfg.schemes for N in cfg.N_inverse]

        def work(job):
            method, N = job
            if fine_phi is not None:
                phi = subsample(fine_phi, cfg.N_data, N)
            else:
                phi = _observe(ctx, N, _matched_data_scheme(method))[1]
            try:
                return _inverse_run(ctx, method, N, phi), None
            except Exception as exc:  # reported after the other runs finish
                return None, exc

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, jobs))
        else:
            results = [work(j) for j in jobs]

        rows = []
        per_method: dict[str, list] = {}
        for (method, N), (res, exc) in zip(jobs, results):
            if exc is not None:
                log.error("%s N=%d failed: %s", method, N, exc)
                failure = failure or exc
                continue
            if not np.all(np.isfinite(res.p_series)):
                failure = failure or InvalidInputError(f"{method} N={N} produced non-finite values")
                continue
            sub = out / method
            sub.mkdir(exist_ok=True)
            f = sub / f"p_recovered_N{N}.csv"
            res.to_csv(f, cfg.p_exact)
            files.append(f)
            err = res.errors(cfg.p_exact)
            e = max_error(res.times, err, cfg.T, cfg.error_windows)
            sw = window_mask(res.times, cfg.T, [cfg.sign_window])
            rows.append([method, N, e, sign_changes(err[sw]), float(np.nanmax(res.residual)) if np.isfinite(res.residual).any() else float("nan")])
            per_method.setdefault(method, []).append((N, e))
        f = out / "summary.csv"
        _write_rows(f, ["scheme", "N", "max_error", "sign_changes", "max_residual"], rows)
        files.append(f)

        conv = []
        for method, pairs in per_method.items():
            pairs.sort()
            orders = observed_orders([e for _, e in pairs])
            conv += [[method, N, e, o] for (N, e), o in zip(pairs, orders)]
        f = out / "convergence.csv"
        _write_rows(f, ["scheme", "N", "max_error", "observed_order"], conv)
        files.append(f)

    manifest = {
        "config": _jsonable(cfg.raw),
        "mesh": summary["mesh"],
        "versions": {
            "coefid": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": [{"path": str(p.relative_to(out)), "sha256": _sha256(p)} for p in files],
        "status": "ok" if failure is None else f"failed: {failure}",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if failure is not None:
        raise failure
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
