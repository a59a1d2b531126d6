"""Command-line workflow: mesh generation, simulation, comparison, slices, benchmarks.

Exit codes: 0 success, 1 usage errors (bad flags), 2 input errors
(unreadable or inconsistent files, bad parameter values), 3 numerical
failures (solver breakdown, step failure at the minimum dt, material
range violations).

``simulate`` accepts a ``--config`` file of ``key=value`` lines using
the same names as the long flags (underscores for dashes); explicit
flags override the file, which overrides built-in defaults.

``compare``, ``slice`` and ``bench`` optionally render a figure next
to their CSV output when ``--plot`` is given.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fem import MaterialParams, PhysicsRangeError, SimConfig, StepFailureError, run_simulation
from .mesh import DEFAULT_EXTENT, generate_box_mesh, load_mesh, save_mesh
from .metrics import psnr_series, slice_diff, slice_field, write_psnr_csv, write_slice_csv
from .results import ResultWriter, read_result_file
from .solver import BACKENDS, ORDERINGS, PRECONDITIONERS, SolverConfig, SolverError
from .trace import Region, Tracer, summarize, write_trace_csv

__all__ = ["UsageError", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Bad command line (unknown flag, missing argument, bad choice)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# flag/file parsing helpers

_SIM_DEFAULTS = {
    "solver": "qr",
    "m": 30,
    "tol": 1e-10,
    "precondition": "none",
    "ordering": "rcm",
    "reuse_ordering": False,
    "total_time": 900.0,
    "dt_init": 0.5,
    "dt_min": 1e-6,
    "dt_max": 10.0,
    "corrector_tol": 1e-4,
    "max_corrector_iters": 50,
    "applied_voltage": 25.0,
    "boundary_temp": 37.0,
    "initial_temp": 37.0,
    "threads": 1,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_CONFIG_TYPES = {
    key: (_parse_bool if isinstance(default, bool)
          else type(default))
    for key, default in _SIM_DEFAULTS.items()
}


def load_config_file(path) -> dict:
    """Parse a ``key=value`` config file ('#' comments, blank lines ok)."""
    settings = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
            try:
                settings[key] = _CONFIG_TYPES[key](value.strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return settings


def _effective_settings(args) -> dict:
    eff = dict(_SIM_DEFAULTS)
    if getattr(args, "config", None):
        eff.update(load_config_file(args.config))
    for key in _SIM_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            eff[key] = value
    return eff


def _build_configs(eff: dict) -> SimConfig:
    solver = SolverConfig(
        backend=eff["solver"],
        restart_m=eff["m"],
        tolerance=eff["tol"],
        precondition=eff["precondition"],
        ordering=eff["ordering"],
        reuse_ordering=eff["reuse_ordering"],
    )
    return SimConfig(
        total_time=eff["total_time"],
        dt_init=eff["dt_init"],
        dt_min=eff["dt_min"],
        dt_max=eff["dt_max"],
        corrector_tol=eff["corrector_tol"],
        max_corrector_iters=eff["max_corrector_iters"],
        applied_voltage=eff["applied_voltage"],
        boundary_temp=eff["boundary_temp"],
        initial_temp=eff["initial_temp"],
        threads=eff["threads"],
        solver=solver,
    )


def _parse_extent(text: str):
    parts = text.split(",")
    if len(parts) != 6:
        raise ValueError("extent must be six comma-separated numbers: x0,x1,y0,y1,z0,z1")
    vals = [float(p) for p in parts]
    return ((vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]))


def _parse_plane(text: str) -> tuple[str, float]:
    axis, sep, value = text.partition("=")
    axis = axis.strip().lower()
    if not sep or axis not in ("x", "y", "z"):
        raise ValueError(f"plane must look like y=0, got {text!r}")
    return axis, float(value)


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"grid must look like 200x200, got {text!r}")
    nu, nv = int(parts[0]), int(parts[1])
    if nu < 2 or nv < 2:
        raise ValueError("grid must be at least 2x2")
    return nu, nv


def _parse_float_list(text: str) -> tuple[float, ...]:
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(float(p) for p in items)


def _parse_int_list(text: str) -> tuple[int, ...]:
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in items)


def _plot_path(out) -> Path:
    return Path(out).with_suffix(".png")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_genmesh(args) -> int:
    extent = _parse_extent(args.extent) if args.extent else DEFAULT_EXTENT
    mesh = generate_box_mesh(args.nx, args.ny, args.nz, extent)
    save_mesh(mesh, args.out)
    print(f"wrote {args.out}: {mesh.node_count} nodes, {mesh.tet_count} tets")
    return EXIT_OK


def cmd_simulate(args) -> int:
    eff = _effective_settings(args)
    config = _build_configs(eff)
    mesh = load_mesh(args.mesh)
    tracer = Tracer() if args.trace else None
    with ResultWriter(args.out, mesh.node_count) as writer:
        summary = run_simulation(
            mesh, MaterialParams.default(), config, sink=writer.append, tracer=tracer
        )
    if args.trace:
        write_trace_csv(tracer.events, args.trace)
    print(f"mesh nodes: {mesh.node_count}")
    print(f"accepted steps: {summary.accepted_steps}")
    print(f"corrector iterations: {summary.total_corrector_iters}")
    print(f"solver iterations: {summary.total_solver_iterations}")
    print(f"dt halvings: {summary.dt_halvings}")
    print(f"wall time: {summary.wall_ns / 1e9:.3f} s")
    return EXIT_OK


def cmd_compare(args) -> int:
    ref = read_result_file(args.ref)
    test = read_result_file(args.test)
    amps = _parse_float_list(args.noise_controls) if args.noise_controls else ()
    series = psnr_series(ref, test, amps)
    write_psnr_csv(series, args.out)
    print(f"wrote {args.out}: {len(series)} steps")
    if args.plot:
        from .plots import save_psnr_plot

        figure = _plot_path(args.out)
        save_psnr_plot(series, figure)
        print(f"wrote {figure}")
    return EXIT_OK


def _step_fields(result, step: int, field: str) -> np.ndarray:
    try:
        rec = result.steps[result.step_index(step)]
    except KeyError as exc:
        raise ValueError(exc.args[0]) from None
    return rec.T if field == "T" else rec.V


def cmd_slice(args) -> int:
    mesh = load_mesh(args.mesh)
    result = read_result_file(args.results)
    if result.node_count != mesh.node_count:
        raise ValueError(
            f"result file has {result.node_count} nodes but the mesh has {mesh.node_count}"
        )
    plane = _parse_plane(args.plane)
    grid = _parse_grid(args.grid)
    field = _step_fields(result, args.step, args.field)
    if args.diff:
        other = read_result_file(args.diff)
        if other.node_count != mesh.node_count:
            raise ValueError(
                f"diff file has {other.node_count} nodes but the mesh has {mesh.node_count}"
            )
        other_field = _step_fields(other, args.step, args.field)
        sliced = slice_diff(mesh, field, other_field, plane, grid)
        value_name = "abs_diff"
    else:
        sliced = slice_field(mesh, field, plane, grid)
        value_name = "value"
    write_slice_csv(sliced, args.out, value_name)
    print(f"wrote {args.out}: {grid[0]}x{grid[1]} samples of {args.field}")
    if args.plot:
        from .plots import save_slice_plot

        figure = _plot_path(args.out)
        save_slice_plot(sliced, figure, value_name)
        print(f"wrote {figure}")
    return EXIT_OK


_BENCH_REGIONS = [
    Region.ASSEMBLY,
    Region.SOLVE,
    Region.STAGE_IN,
    Region.STAGE_OUT,
    Region.PREDICTOR,
    Region.CONVERGE,
    Region.IO,
    Region.ORDERING,
]


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise ValueError("reps must be at least 1")
    mesh = load_mesh(args.mesh)
    backends = tuple(p.strip() for p in args.backends.split(",") if p.strip())
    if not backends:
        raise ValueError("no backends requested")
    for backend in backends:
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")
    sweep = _parse_int_list(args.sweep_m) if args.sweep_m else ()

    plans = []
    for backend in backends:
        ms = sweep if (backend == "gmres" and sweep) else (args.m,)
        plans.extend((backend, mm) for mm in ms)

    rows = []
    for backend, mm in plans:
        solver = SolverConfig(
            backend=backend, restart_m=mm, tolerance=args.tol,
            reuse_ordering=args.reuse_ordering or False,
        )
        config = SimConfig(
            total_time=args.total_time, dt_init=args.dt_init, threads=args.threads or 1,
            solver=solver,
        )
        for rep in range(args.reps):
            tracer = Tracer()
            summary = run_simulation(mesh, MaterialParams.default(), config, tracer=tracer)
            by_region = summarize(tracer.events)
            rows.append({
                "backend": backend,
                "m": mm,
                "tol": args.tol,
                "rep": rep,
                "makespan_ns": summary.wall_ns,
                "solver_iterations": summary.total_solver_iterations,
                "regions": {
                    reg: (by_region[reg].mean_ns if reg in by_region else 0.0)
                    for reg in _BENCH_REGIONS
                },
            })

    dense_spans = [row["makespan_ns"] for row in rows if row["backend"] == "dense"]
    dense_mean = (sum(dense_spans) / len(dense_spans)) if dense_spans else None

    header = ["backend", "m", "tol", "rep", "makespan_ns", "solver_iterations", "speedup"]
    header += [f"mean_{reg.value.lower()}_ns" for reg in _BENCH_REGIONS]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            speedup = "" if dense_mean is None else _fmt(dense_mean / row["makespan_ns"])
            writer.writerow(
                [row["backend"], str(row["m"]), _fmt(row["tol"]), str(row["rep"]),
                 str(row["makespan_ns"]), str(row["solver_iterations"]), speedup]
                + [_fmt(row["regions"][reg]) for reg in _BENCH_REGIONS]
            )
    print(f"wrote {args.out}: {len(rows)} rows")

    gmres_ms = sorted({row["m"] for row in rows if row["backend"] == "gmres"})
    if len(gmres_ms) > 1:
        means = {
            mm: np.mean([r["makespan_ns"] for r in rows
                         if r["backend"] == "gmres" and r["m"] == mm])
            for mm in gmres_ms
        }
        best = min(means, key=lambda mm: means[mm])
        print(f"best m: {best} (mean makespan {means[best] / 1e9:.3f} s)")

    if args.plot:
        from .plots import save_bench_plot

        labels = []
        spans = []
        for backend, mm in plans:
            sel = [r["makespan_ns"] for r in rows if r["backend"] == backend and r["m"] == mm]
            labels.append(f"{backend} m={mm}" if backend == "gmres" else backend)
            spans.append(float(np.mean(sel)))
        figure = _plot_path(args.out)
        save_bench_plot(labels, spans, figure)
        print(f"wrote {figure}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rafem", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("genmesh", help="generate a box tet mesh file")
    p.add_argument("--nx", type=int, required=True, help="grid nodes along x (>= 2)")
    p.add_argument("--ny", type=int, required=True)
    p.add_argument("--nz", type=int, required=True)
    p.add_argument("--extent", help="domain box as x0,x1,y0,y1,z0,z1 [mm]")
    p.add_argument("--out", required=True, help="output mesh path")
    p.set_defaults(func=cmd_genmesh)

    p = sub.add_parser("simulate", help="run the coupled simulation")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="binary result path")
    p.add_argument("--solver", choices=BACKENDS)
    p.add_argument("--m", type=int, help="restart length for gmres")
    p.add_argument("--tol", type=float, help="solver relative tolerance")
    p.add_argument("--precondition", choices=PRECONDITIONERS)
    p.add_argument("--ordering", choices=ORDERINGS)
    p.add_argument("--reuse-ordering", action="store_true", default=None,
                   help="compute the fill-reducing ordering once and reuse it")
    p.add_argument("--total-time", type=float, help="simulated seconds")
    p.add_argument("--dt-init", type=float)
    p.add_argument("--dt-min", type=float)
    p.add_argument("--dt-max", type=float)
    p.add_argument("--corrector-tol", type=float)
    p.add_argument("--max-corrector-iters", type=int)
    p.add_argument("--applied-voltage", type=float)
    p.add_argument("--boundary-temp", type=float)
    p.add_argument("--initial-temp", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--trace", help="write a region trace CSV to this path")
    p.add_argument("--config", help="key=value settings file; flags override")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="per-step PSNR between two result files")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--noise-controls", help="comma list of control amplitudes, e.g. 1e-5,1e-12")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot", action="store_true", help="also render a figure next to the CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("slice", help="sample a stored field on an axis plane")
    p.add_argument("--mesh", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--plane", default="y=0", help="axis=value, e.g. y=0")
    p.add_argument("--grid", default="200x200", help="samples as NUxNV")
    p.add_argument("--field", choices=("T", "V"), default="T")
    p.add_argument("--diff", help="second result file; output |a-b| instead")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot", action="store_true", help="also render a figure next to the CSV")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("bench", help="benchmark solver configurations")
    p.add_argument("--mesh", required=True)
    p.add_argument("--backends", default="qr,gmres", help="comma list from qr,gmres,dense")
    p.add_argument("--sweep-m", help="comma list of gmres restart lengths")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--m", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--reuse-ordering", action="store_true", default=None)
    p.add_argument("--total-time", type=float, default=5.0)
    p.add_argument("--dt-init", type=float, default=0.5)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot", action="store_true", help="also render a figure next to the CSV")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, StepFailureError, PhysicsRangeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
