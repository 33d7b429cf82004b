#!/usr/bin/env python3

"""Command-line entry point for the resilient PCG simulator."""

import argparse
import json
import logging
import re
import sys
from typing import Dict, List, Optional, Sequence

import parameters
from harness import ExperimentConfig, load_problem, run_experiment, run_single, verify_invariants
from matrices import partition_rows
from planner import compute_redundancy_plan, compute_send_sets, estimate_overhead, verify_plan, zero_latency_condition
from reports import emit_report
from solver import RunReport

FAIL_PATTERN = re.compile(r"^(\d+)@([0-9]*\.?[0-9]+)(?::(start|center))?$")


class UsageError(ValueError):
    """Invalid command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--matrix", type=str, help="Matrix Market file (coordinate, real, SPD)")
    source.add_argument("--gen", dest="generator", type=str,
                        help="Generator spec: laplace1d:n, laplace2d:k or band:n,b,dominance[,open]")
    common.add_argument("--config", type=str, help="JSON experiment configuration; flags override it")
    common.add_argument("--nodes", type=int, help="Number of simulated nodes N")
    common.add_argument("--redundancy", type=int, help="Tolerated simultaneous failures rho")
    common.add_argument("--failures", type=int, help="Simultaneous failures per disturbed run")
    common.add_argument("--fail-at", type=str, help="Comma-separated progress fractions, e.g. 0.2,0.5")
    common.add_argument("--fail-location", choices=parameters.FAILURE_LOCATIONS,
                        help="Place failed ranks at the start or the center")
    common.add_argument("--fail", type=str, help="Shorthand NF@FRACTION[:LOCATION], e.g. 1@0.5:center")
    common.add_argument("--overlap", type=int, help="Extra failures striking during reconstruction")
    common.add_argument("--reps", dest="repetitions", type=int, help="Repetitions per cell")
    common.add_argument("--seed", type=int, help="Seed of the random right-hand side")
    common.add_argument("--rhs", choices=parameters.RHS_KINDS, help="Right-hand side kind")
    common.add_argument("--tol", dest="rel_tolerance", type=float, help="Outer relative tolerance")
    common.add_argument("--inner-tol", dest="inner_tolerance", type=float,
                        help="Relative tolerance of the inner subsystem solve")
    common.add_argument("--max-iterations", type=int, help="Outer iteration cap")
    common.add_argument("--preconditioner", choices=parameters.PRECONDITIONERS)
    common.add_argument("--inner-preconditioner", choices=parameters.INNER_PRECONDITIONERS)
    common.add_argument("--direct-threshold", type=int,
                        help="Largest subsystem solved by dense Cholesky")
    common.add_argument("--latency", type=float, help="Per-message latency in model units")
    common.add_argument("--bandwidth-cost", type=float, help="Per-element cost in model units")
    common.add_argument("--workers", type=int, help="Threads for batch cells")
    common.add_argument("--output", type=str, help="Report file (stdout when omitted)")
    common.add_argument("--format", choices=parameters.REPORT_FORMATS, help="Report format")
    common.add_argument("--trace", type=str, help="JSON-lines event trace file")
    common.add_argument("--wall-clock", action="store_true", help="Include wall-clock times in reports")
    common.add_argument("--log-file", type=str, help="Log file path (stderr when omitted)")
    common.add_argument("--verbose", action="store_true",
                        help="Enable verbose logging (DYNAMIC_MODE)")

    parser = _Parser(description="Resilient PCG with exact state reconstruction on a simulated cluster")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("solve", parents=[common], help="Reference run plus one resilient run")
    commands.add_parser("experiment", parents=[common], help="Batch over failure locations and progress")
    commands.add_parser("plan", parents=[common], help="Redundancy plan and overhead bounds only")
    commands.add_parser("verify", parents=[common], help="Invariant suite on one matrix")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """
    Merge the optional JSON configuration file with command-line flags.

    Raises:
        UsageError: Bad flag values or an inconsistent configuration.
    """
    try:
        config = ExperimentConfig.from_json_file(args.config) if args.config else ExperimentConfig()
    except (OSError, ValueError) as exc:
        raise UsageError(f"Cannot read configuration {args.config}: {exc}")

    overrides: Dict = {key: getattr(args, key) for key in (
        "nodes", "redundancy", "failures", "overlap", "repetitions",
        "seed", "rhs", "rel_tolerance", "inner_tolerance", "max_iterations", "preconditioner",
        "inner_preconditioner", "direct_threshold", "latency", "bandwidth_cost", "workers",
        "output", "format", "trace")}
    if args.matrix or args.generator:
        config.matrix, config.generator = args.matrix, args.generator
    if args.fail_at:
        try:
            overrides["progress"] = [float(v) for v in args.fail_at.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"Invalid --fail-at {args.fail_at!r}")
    if args.fail_location:
        overrides["locations"] = [args.fail_location]
    if args.fail:
        match = FAIL_PATTERN.match(args.fail.strip())
        if not match:
            raise UsageError(f"Invalid --fail {args.fail!r}; expected NF@FRACTION[:LOCATION]")
        overrides["failures"] = int(match.group(1))
        overrides["progress"] = [float(match.group(2))]
        if match.group(3):
            overrides["locations"] = [match.group(3)]

    try:
        config = config.merged(overrides)
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return config


def write_output(config: ExperimentConfig, text: str) -> None:
    if config.output:
        with open(config.output, "w") as f:
            f.write(text)
        logging.info("Saved output to %s", config.output)
    else:
        sys.stdout.write(text)


def exit_code(reports: Sequence[RunReport]) -> int:
    statuses = [r.status for r in reports]
    if "unrecoverable" in statuses:
        return parameters.EXIT_UNRECOVERABLE
    if any(status != "converged" for status in statuses):
        return parameters.EXIT_SOLVER_FAILURE
    return parameters.EXIT_SUCCESS


def run_runs(config: ExperimentConfig, single: bool, wall_clock: bool) -> int:
    reports = run_single(config) if single else run_experiment(config)
    write_output(config, emit_report(reports, config.format, include_wall_clock=wall_clock))
    return exit_code(reports)


def run_plan(config: ExperimentConfig) -> int:
    """Plan, overhead bounds, zero-latency condition and coverage check as JSON."""
    matrix, _ = load_problem(config)
    partition = partition_rows(matrix.n_rows, config.nodes)
    pattern = compute_send_sets(matrix, partition)
    plan = compute_redundancy_plan(pattern, config.redundancy)
    verification = verify_plan(plan, pattern)
    estimate = estimate_overhead(plan, pattern, config.latency, config.bandwidth_cost)
    zero_latency = zero_latency_condition(matrix, partition, config.redundancy)
    document = {
        "schema_version": parameters.REPORT_SCHEMA_VERSION,
        "n": matrix.n_rows,
        "nnz": matrix.nnz,
        "nodes": config.nodes,
        "plan": plan.to_json_dict(),
        "monotone": plan.is_monotone(),
        "overhead": estimate.to_dict(),
        "zero_latency": [[i, k, holds] for (i, k), holds in sorted(zero_latency.items())],
        "verification": verification.to_dict(),
    }
    write_output(config, json.dumps(document, indent=2) + "\n")
    return parameters.EXIT_SUCCESS if verification.passed else parameters.EXIT_SOLVER_FAILURE


def run_verify(config: ExperimentConfig) -> int:
    summary = verify_invariants(config)
    write_output(config, json.dumps(summary.to_dict(), indent=2) + "\n")
    return parameters.EXIT_SUCCESS if summary.passed else parameters.EXIT_SOLVER_FAILURE


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the subcommand and return the exit code.

    Exit codes: 0 success, 1 solver failure, 2 unrecoverable failure, 3 usage error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {exc}\n")
        return parameters.EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else parameters.EXIT_SUCCESS

    logging.basicConfig(filename=args.log_file, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    parameters.DYNAMIC_MODE = args.verbose

    try:
        config = load_config(args)
        if args.command == "plan":
            return run_plan(config)
        if args.command == "verify":
            return run_verify(config)
        return run_runs(config, single=args.command == "solve", wall_clock=args.wall_clock)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {exc}\n")
        return parameters.EXIT_USAGE
    except (OSError, ValueError) as exc:
        logging.error("Cannot load input: %s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return parameters.EXIT_USAGE


def main():
    """Main function to parse arguments and run the simulator."""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
