"""Command-line entry point: ``coefid mesh|direct|identify|run|run-config``.

Exit status: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .direct import TimeGrid
from .errors import CoefidError, InvalidInputError, MeshingError, NumericalError
from .experiments import DEFAULT_EDGE_LENGTH, PRESETS, _context, parse_config, preset_config, load_config, run_experiment
from .inverse import identify, solve_nonlinear_implicit, solve_via_transform
from .mesh import PolygonSpec, trapezoid, triangulate, validate

log = logging.getLogger("coefid")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="noise seed")
    p.add_argument("--threads", type=int, default=1, help="concurrent runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coefid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mesh", help="triangulate a convex polygon and write the mesh text file")
    _common(p)
    p.add_argument("--edge-length", type=float, default=DEFAULT_EDGE_LENGTH)
    p.add_argument("--vertices", type=float, nargs="+", help="x1 y1 x2 y2 ... (default: trapezoid)")

    p = sub.add_parser("direct", help="solve the direct problem and write observation series")
    _common(p)
    p.add_argument("--config", help="YAML file providing problem/domain settings")
    p.add_argument("--coefficient", default=None, choices=["ramp_step", "smooth_rational", "zero"])
    p.add_argument("--N", type=int, nargs="+", default=None)
    p.add_argument("--scheme", default=None, choices=["implicit", "crank_nicolson"])
    p.add_argument("--x-star", type=float, nargs=2, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--field", action="store_true", help="also write full nodal trajectories")

    p = sub.add_parser("identify", help="recover p(t) from an observation CSV (t,value)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="YAML file providing problem/domain settings")
    p.add_argument("--scheme", default="first_order",
                   choices=["first_order", "crank_nicolson", "hybrid", "transform", "nonlinear_implicit"])
    p.add_argument("--N", type=int, default=None, help="inverse step count (subsamples the data)")
    p.add_argument("--x-star", type=float, nargs=2, default=None)
    p.add_argument("--p0", default=None, help="startup value or method for p^0")
    p.add_argument("--coefficient", default=None, choices=["ramp_step", "smooth_rational", "zero"],
                   help="exact coefficient, adds a p_exact column")

    p = sub.add_parser("run", help="run a built-in preset")
    _common(p)
    p.add_argument("preset", help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--coefficient", default=None, choices=["ramp_step", "smooth_rational", "zero"])

    p = sub.add_parser("run-config", help="run the experiments described in a YAML config")
    _common(p)
    p.add_argument("path")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o.setdefault("noise", {})["seed"] = args.seed
    return o


def _cmd_mesh(args):
    polygon = trapezoid()
    if args.vertices:
        if len(args.vertices) % 2:
            raise InvalidInputError("--vertices needs an even number of values")
        polygon = PolygonSpec(np.reshape(args.vertices, (-1, 2)))
    mesh = triangulate(polygon, args.edge_length)
    problems = validate(mesh, polygon)
    if problems:
        raise MeshingError(f"mesh failed validation: {problems[:5]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh.save(out / "mesh.txt")
    print(f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} boundary_edges {len(mesh.boundary_edges)} "
          f"min_angle {mesh.min_angle():.2f}")


def _base_raw(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config).raw
    return {}


def _cmd_direct(args):
    raw = _base_raw(args)
    raw["mode"] = "direct"
    raw.setdefault("name", "direct")
    tm = raw.setdefault("time", {})
    if args.N:
        tm["N_direct"] = args.N
    if args.scheme:
        tm["data_scheme"] = args.scheme
    if args.coefficient:
        raw["coefficient"] = {"kind": args.coefficient}
    if args.x_star:
        raw.setdefault("observation", {}).update(kind="point", x_star=list(args.x_star))
    if args.noise is not None:
        raw.setdefault("noise", {})["level"] = args.noise
    if args.field:
        raw.setdefault("output", {})["field"] = True
    if args.seed is not None:
        raw.setdefault("noise", {})["seed"] = args.seed
    run_experiment(parse_config(raw), args.out, args.threads)


def _read_series(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:2]] != ["t", "value"]:
        raise InvalidInputError(f"{path}: expected header 't,value'")
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:] if r], dtype=float)
    except (ValueError, IndexError) as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    if len(data) < 2:
        raise InvalidInputError(f"{path}: need at least two samples")
    t = data[:, 0]
    if abs(t[0]) > 1e-14 or np.any(np.diff(t) <= 0) or not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9):
        raise InvalidInputError(f"{path}: times must be uniform and start at 0")
    return t, data[:, 1]


def _cmd_identify(args):
    raw = _base_raw(args)
    if args.x_star:
        raw.setdefault("observation", {}).update(kind="point", x_star=list(args.x_star))
    if args.coefficient:
        raw["coefficient"] = {"kind": args.coefficient}
    t, phi = _read_series(args.data)
    n_data = len(t) - 1
    T = float(t[-1])
    raw.setdefault("time", {}).update(T=T, N_data=n_data, N_inverse=[args.N or n_data])
    cfg = parse_config(raw)
    N = cfg.N_inverse[0]
    if n_data % N:
        raise InvalidInputError(f"data step count {n_data} is not divisible by N={N}")
    phi = phi[:: n_data // N]
    ctx = _context(cfg)
    grid = TimeGrid(T, N)
    if args.scheme == "transform":
        res = solve_via_transform(ctx.mesh, cfg.spec, grid, ctx.obs, phi, forms=ctx.forms)[1]
    elif args.scheme == "nonlinear_implicit":
        res = solve_nonlinear_implicit(ctx.mesh, cfg.spec, grid, ctx.obs, phi, forms=ctx.forms)
    else:
        p0 = args.p0
        if p0 is not None:
            try:
                p0 = float(p0)
            except ValueError:
                pass
        res = identify(ctx.mesh, cfg.spec, grid, args.scheme, ctx.obs, phi, p_0=p0, forms=ctx.forms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "p_recovered.csv", cfg.p_exact if args.coefficient else None)
    print(f"wrote {out / 'p_recovered.csv'} ({N} steps, scheme {args.scheme})")


def _cmd_run(args):
    if args.preset not in PRESETS:
        raise InvalidInputError(f"unknown preset {args.preset!r}; expected one of {', '.join(sorted(PRESETS))}")
    over = _overrides(args)
    if args.coefficient:
        over["coefficient"] = {"kind": args.coefficient}
        if args.coefficient == "zero":
            # exact zero recovery needs data from the same grid
            over.setdefault("time", {})["data_grid"] = "matched"
    cfg = preset_config(args.preset, over)
    run_experiment(cfg, args.out, args.threads)
    print(f"preset {args.preset}: outputs in {args.out}")


def _cmd_run_config(args):
    cfg = load_config(args.path)
    if args.seed is not None:
        cfg = parse_config({**cfg.raw, "noise": {**cfg.raw["noise"], "seed": args.seed}})
    run_experiment(cfg, args.out, args.threads)
    print(f"config {args.path}: outputs in {args.out}")


COMMANDS = {
    "mesh": _cmd_mesh,
    "direct": _cmd_direct,
    "identify": _cmd_identify,
    "run": _cmd_run,
    "run-config": _cmd_run_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"coefid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MeshingError as exc:
        print(f"coefid: meshing failed: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, CoefidError) as exc:
        print(f"coefid: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
