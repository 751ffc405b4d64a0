"""Command-line entry point: ``supg-dwr run|describe <config>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapt import dwr_loop, global_loop
from .assembly import SolverError, dump_matrix
from .config import (ConfigError, build_goal, build_mesh, build_problem, format_config,
                     load_config, with_overrides)
from .problem import ConfigurationError, DegenerateGoalError
from .report import ReportError, RunReport, write_csv, write_json, write_vtu

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("supg_dwr")


def _snapshot_writer(cfg, outdir: Path):
    def callback(rec, state):
        it = rec.iteration
        if cfg.output.vtu:
            fields = {"u_h": (state.primal, state.u_h)}
            if state.delta is not None:
                fields["delta"] = state.delta
            if state.dual is not None:
                fields["z_h"] = (state.dual, state.z_h)
            if state.indicators is not None:
                fields["eta"] = state.indicators.eta_K
            write_vtu(state.mesh, fields, outdir / f"solution_{it:03d}.vtu")
        if cfg.output.dump_matrices:
            for name, system in sorted(state.systems.items()):
                dump_matrix(system, outdir / f"{name}_{it:03d}.mtx")
    return callback


def run_config(cfg, records=None) -> RunReport:
    """Execute one configured run, writing results into the output directory.

    ``records`` collects iteration records as they complete, so a caller
    still has them if a solve fails part way.
    """
    problem = build_problem(cfg)
    goal = build_goal(cfg)
    mesh = build_mesh(cfg, problem)
    outdir = Path(cfg.output.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    snapshot = _snapshot_writer(cfg, outdir)
    records = [] if records is None else records

    def callback(rec, state):
        records.append(rec)
        snapshot(rec, state)

    loop = global_loop if cfg.adaptivity.mode == "global" else dwr_loop
    result = loop(problem, goal, cfg.adapt_config(), mesh, callback)
    report = RunReport(cfg.to_dict(), list(result.records), result.reason)
    write_csv(report, outdir / "history.csv", timing=cfg.output.timing)
    write_json(report, outdir / "summary.json", timing=cfg.output.timing)
    return report


def _cmd_run(args) -> int:
    try:
        cfg, _ = load_config(args.config, strict=True)
        cfg = with_overrides(cfg, args.output_dir, args.max_iterations, args.full)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    records = []
    try:
        report = run_config(cfg, records)
    except (ConfigurationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, DegenerateGoalError, ArithmeticError) as exc:
        outdir = Path(cfg.output.directory)
        partial = RunReport(cfg.to_dict(), records, f"solver failure: {exc}")
        write_csv(partial, outdir / "history.csv", timing=cfg.output.timing)
        write_json(partial, outdir / "summary.json", timing=cfg.output.timing)
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    last = report.records[-1] if report.records else None
    if last is not None:
        print(f"{len(report.records)} iterations ({report.reason}); final dofs {last.dofs_primal}, "
              f"error {last.err_exact}, estimate {last.eta}, ieff {last.ieff}")
    print(f"results written to {cfg.output.directory}")
    return EXIT_OK


def _cmd_describe(args) -> int:
    try:
        cfg, warnings = load_config(args.config, strict=False)
        cfg = with_overrides(cfg, args.output_dir, args.max_iterations, args.full)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(format_config(cfg), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supg-dwr",
        description="Goal-oriented adaptive SUPG solver for convection-diffusion-reaction problems.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (("run", _cmd_run, "run a configured computation"),
                           ("describe", _cmd_describe, "print the resolved configuration")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="TOML or JSON configuration file")
        p.add_argument("--output-dir", help="override output.directory")
        p.add_argument("--max-iterations", type=int, help="override adaptivity.max_iterations")
        p.add_argument("--full", action="store_true",
                       help="drop the adaptivity.max_dofs cap (long runs)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
