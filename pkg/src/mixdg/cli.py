"""Command-line front end: ``mixdg <subcommand> [options]``.

Options may also come from a JSON file given with ``--config``; explicit
flags override its entries. Every output embeds the resolved configuration.
Exit codes: 0 success, 2 invalid input, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys

import numpy as np
import scipy.sparse.linalg as spla

from .forms import AssemblyError
from .mesh import MeshError
from .spectral import KERNEL, PHYSICAL, TRACE_NULL, UNRESOLVED, SolverError
from .study import (
    BOUNDARY_CHOICES,
    SOLVERS,
    ConfigError,
    RunConfig,
    Runner,
    StudyError,
    convergence_study,
    fit_order,
    fits_to_csv,
    lambda_limit_study,
    reference_alpha,
    refine_study,
    sweep_penalty,
)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3

# option name -> RunConfig field
_RUN_FIELDS = {
    "k": "k", "nu": "nu", "aS": "aS", "bc": "bc", "modes": "m", "solver": "solver",
    "shift": "shift", "E": "E", "rho": "rho", "pattern": "pattern", "penalty_length": "penalty_length",
    "tol": "tol",
}


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    if isinstance(text, int):
        return [text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    common.add_argument("--k", type=int, help="polynomial degree of the stress space (default 3)")
    common.add_argument("--nu", type=float, help="Poisson ratio in (0, 0.5] (default 0.35)")
    common.add_argument("--aS", "--as", dest="aS",
                        help="stabilization parameter (default 1000); for sweep-as, the swept list")
    common.add_argument("--bc", choices=BOUNDARY_CHOICES, help="Dirichlet side (default bottom)")
    common.add_argument("--modes", type=int, help="number of physical frequencies (default 10)")
    common.add_argument("--solver", choices=SOLVERS, help="eigensolver (default auto)")
    common.add_argument("--shift", type=float, help="shift kappa0 for shift-invert (default 1.3)")
    common.add_argument("--E", type=float, help="Young modulus (default 1)")
    common.add_argument("--rho", type=float, help="density (default 1)")
    common.add_argument("--pattern", help="mesh diagonal pattern: diamond or cross (default diamond)")
    common.add_argument("--penalty-length", dest="penalty_length", help="face or cell-average (default face)")
    common.add_argument("--tol", type=float, help="eigensolver tolerance (default 1e-10)")
    common.add_argument("--output", "-o", help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), help="output format (default csv)")

    p = sub.add_parser("solve", parents=[common], help="smallest physical frequencies of one configuration")
    p.add_argument("--N", help="subdivisions per side, even (default 8)")
    p.add_argument("--export-mesh", dest="export_mesh", help="also write the mesh as JSON to this path")
    p.add_argument("--export-matrices", dest="export_matrices", help="also write A and B as MatrixMarket with this prefix")

    p = sub.add_parser("sweep-as", parents=[common], help="frequencies over stabilization values with spurious flags")
    p.add_argument("--N", help="subdivisions per side (default 8)")
    p.add_argument("--values", "--as-values", dest="as_values", help="comma-separated aS values (default 5,10,20,40,80)")
    p.add_argument("--reference-as", dest="reference_as", type=float, help="trusted aS (default 1000)")

    p = sub.add_parser("refine", parents=[common], help="frequencies over mesh refinements")
    p.add_argument("--N", help="comma-separated ascending N values (default 8,16,32,64)")

    p = sub.add_parser("converge", parents=[common], help="convergence order of tracked modes")
    p.add_argument("--N", help="comma-separated ascending N values (default 16,32,48,64)")
    p.add_argument("--track", help="comma-separated 1-based mode numbers (default 1)")

    p = sub.add_parser("limit", parents=[common], help="frequency gap to the incompressible limit")
    p.add_argument("--N", help="subdivisions per side (default 16)")
    p.add_argument("--nu-values", dest="nu_values", help="comma-separated increasing nu < 0.5 (default 0.45,0.49,0.499,0.4999)")
    p.add_argument("--track", help="1-based mode number (default 1)")

    p = sub.add_parser("fit", parents=[common], help="fit omega(h) = omega_ex + C h^alpha to a CSV of (h, omega)")
    p.add_argument("--input", help="CSV with columns h, omega ('#' comments and a header row allowed)")

    p = sub.add_parser("mesh", parents=[common], help="write the mesh and its face skeleton as JSON")
    p.add_argument("--N", help="subdivisions per side (default 8)")
    return parser


_SUB_DEFAULTS = {
    "solve": {"N": "8"},
    "sweep-as": {"N": "8", "as_values": "5,10,20,40,80", "reference_as": 1000.0},
    "refine": {"N": "8,16,32,64"},
    "converge": {"N": "16,32,48,64", "track": "1"},
    "limit": {"N": "16", "nu_values": "0.45,0.49,0.499,0.4999", "track": "1"},
    "fit": {},
    "mesh": {"N": "8"},
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge subcommand defaults, the JSON config file and explicit flags (in increasing precedence)."""
    opts = dict(_SUB_DEFAULTS[args.command])
    opts.setdefault("format", "csv")
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config!r}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        aliases = {"m": "modes", "as": "aS", "penalty-length": "penalty_length"}
        opts.update({aliases.get(k, k): v for k, v in loaded.items()})
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        opts[key] = value
    if args.command == "sweep-as" and args.aS is not None and args.as_values is None:
        # on sweep-as, --as names the swept values
        opts["as_values"] = opts.pop("aS")
    if isinstance(opts.get("aS"), str):
        try:
            opts["aS"] = float(opts["aS"])
        except ValueError as exc:
            raise ConfigError(f"aS must be a number, got {opts['aS']!r}") from exc
    return opts


def _run_config(opts: dict, N) -> RunConfig:
    kwargs = {field: opts[name] for name, field in _RUN_FIELDS.items() if name in opts}
    try:
        return RunConfig(N=N, **kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _single_N(opts) -> int:
    values = _int_list(opts["N"])
    if len(values) != 1:
        raise ConfigError(f"N must be a single even integer here, got {opts['N']!r}")
    return values[0]


def _emit(text: str, opts: dict) -> None:
    path = opts.get("output")
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _resolved(cfg: RunConfig | None, opts: dict, **extra) -> dict:
    out = {} if cfg is None else cfg.to_dict()
    out.update(extra)
    out["command"] = opts["_command"]
    return out


def cmd_solve(opts: dict) -> int:
    cfg = _run_config(opts, _single_N(opts))
    runner = Runner()
    modes = runner.solve(cfg)
    if opts.get("export_mesh"):
        runner.problem(cfg)[0].to_json(opts["export_mesh"])
    if opts.get("export_matrices"):
        runner.pencil(cfg).export_matrix_market(opts["export_matrices"])
    physical = modes.physical()[: cfg.m]
    counts = modes.counts()
    config = _resolved(cfg, opts, method=modes.method, dim=modes.info.get("dim"))
    if opts["format"] == "json":
        doc = {
            "config": config,
            "counts": {"kernel_cluster": counts[KERNEL], "physical": counts[PHYSICAL],
                       "trace_null": counts[TRACE_NULL], "unresolved": counts[UNRESOLVED]},
            "shortfall": cfg.m - len(physical),
            "modes": [{"mode": i + 1, "omega": md.omega, "kappa": md.kappa, "residual": md.residual}
                      for i, md in enumerate(physical)],
        }
        _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", opts)
        return EXIT_OK
    buf = io.StringIO()
    buf.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
    buf.write(
        f"# counts: kernel_cluster={counts[KERNEL]} physical={counts[PHYSICAL]} "
        f"trace_null={counts[TRACE_NULL]} unresolved={counts[UNRESOLVED]} shortfall={cfg.m - len(physical)}\n"
    )
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "omega", "kappa", "residual"])
    for i, md in enumerate(physical):
        writer.writerow([i + 1, f"{md.omega:.7f}", f"{md.kappa:.10g}", f"{md.residual:.2e}"])
    _emit(buf.getvalue(), opts)
    return EXIT_OK


def cmd_sweep_as(opts: dict) -> int:
    cfg = _run_config(opts, _single_N(opts))
    table = sweep_penalty(cfg, _float_list(opts["as_values"]), float(opts["reference_as"]))
    table.config["command"] = opts["_command"]
    _emit(table.to_json() if opts["format"] == "json" else table.to_csv(), opts)
    return EXIT_OK


def cmd_refine(opts: dict) -> int:
    Ns = _int_list(opts["N"])
    cfg = _run_config(opts, Ns[0])
    table = refine_study(cfg, Ns)
    table.config["command"] = opts["_command"]
    _emit(table.to_json() if opts["format"] == "json" else table.to_csv(), opts)
    return EXIT_OK


def cmd_converge(opts: dict) -> int:
    Ns = _int_list(opts["N"])
    cfg = _run_config(opts, Ns[0])
    track = [t - 1 for t in _int_list(opts["track"])]
    if not track or min(track) < 0:
        raise ConfigError("--track takes 1-based mode numbers")
    fits = convergence_study(cfg, Ns, track)
    config = _resolved(cfg, opts, N_values=Ns, track=[t + 1 for t in track],
                       two_s_hat=reference_alpha(cfg.nu))
    if opts["format"] == "json":
        doc = {"config": config, "fits": [f.to_dict() for f in fits]}
        _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", opts)
    else:
        _emit(fits_to_csv(fits, config), opts)
    # tracking failures are reported per mode; only a run with no usable mode fails
    return EXIT_SOLVER if all(f.error for f in fits) else EXIT_OK


def cmd_limit(opts: dict) -> int:
    cfg = _run_config(opts, _single_N(opts))
    track = _int_list(opts["track"])
    if len(track) != 1 or track[0] < 1:
        raise ConfigError("--track takes a single 1-based mode number")
    study = lambda_limit_study(cfg, _float_list(opts["nu_values"]), track[0] - 1)
    study.config["command"] = opts["_command"]
    _emit(study.to_json() if opts["format"] == "json" else study.to_csv(), opts)
    return EXIT_OK


def read_fit_input(path) -> tuple[list[float], list[float]]:
    """Read (h, omega) rows; '#' lines and one non-numeric header row are skipped."""
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read fit input {path!r}: {exc}") from exc
    h, w = [], []
    for n, row in enumerate(csv.reader(lines)):
        try:
            hv, wv = float(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            if n == 0:
                continue
            raise ConfigError(f"bad fit input row {n + 1}: {row!r}") from exc
        h.append(hv)
        w.append(wv)
    if len(h) < 3:
        raise ConfigError(f"fit needs at least 3 data rows, got {len(h)}")
    return h, w


def cmd_fit(opts: dict) -> int:
    if not opts.get("input"):
        raise ConfigError("fit requires --input")
    h, w = read_fit_input(opts["input"])
    fit = fit_order(h, w)
    config = {"command": opts["_command"], "input": opts["input"]}
    if opts["format"] == "json":
        _emit(json.dumps({"config": config, "fit": fit.to_dict()}, indent=1, sort_keys=True) + "\n", opts)
    else:
        _emit(fits_to_csv([fit], config), opts)
    return EXIT_OK


def cmd_mesh(opts: dict) -> int:
    from .mesh import BoundaryPartition, build_uniform_mesh

    cfg = _run_config(opts, _single_N(opts))
    mesh = build_uniform_mesh(cfg.N, BoundaryPartition.from_name(cfg.bc), cfg.pattern)
    doc = {"config": _resolved(cfg, opts), "mesh": mesh.to_dict()}
    _emit(json.dumps(doc, indent=1) + "\n", opts)
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "sweep-as": cmd_sweep_as,
    "refine": cmd_refine,
    "converge": cmd_converge,
    "limit": cmd_limit,
    "fit": cmd_fit,
    "mesh": cmd_mesh,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        opts = resolve_options(args)
        opts["_command"] = args.command
        return COMMANDS[args.command](opts)
    except (ConfigError, MeshError, AssemblyError, ValueError) as exc:
        print(f"mixdg: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SolverError, StudyError, np.linalg.LinAlgError, spla.ArpackError, MemoryError) as exc:
        print(f"mixdg: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
