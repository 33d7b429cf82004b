#!/usr/bin/env python3

"""Global configuration parameters for the resilient PCG simulator."""

from typing import Tuple
import sys

# Solver limits
MAX_ITERATIONS: int = 10000
"""Default cap on outer PCG iterations for a single run."""
DEFAULT_REL_TOLERANCE: float = 1e-8
"""Outer solver stops once the residual norm has been reduced by this factor."""
DEFAULT_INNER_TOLERANCE: float = 1e-14
"""Relative tolerance of the inner subsystem solve during reconstruction."""
INNER_MAX_ITERATIONS: int = 5000
"""Cap on iterations of the inner subsystem solver."""
DIRECT_SOLVE_THRESHOLD: int = 4096
"""Subsystems with at most this many rows are solved by dense Cholesky."""

# Preconditioning
PRECONDITIONERS: Tuple[str, ...] = ("block-jacobi", "identity")
"""Outer preconditioners understood by the solver."""
INNER_PRECONDITIONERS: Tuple[str, ...] = ("exact", "ilu")
"""Block factorizations available to the inner subsystem solver."""
ILU_DROP_TOLERANCE: float = 1e-4
"""Drop tolerance for incomplete LU blocks of the inner solver."""
ILU_FILL_FACTOR: float = 10.0
"""Fill factor for incomplete LU blocks of the inner solver."""

# Latency-bandwidth communication model
DEFAULT_LATENCY: float = 1.0
"""Per-message latency in model time units."""
DEFAULT_BANDWIDTH_COST: float = 0.01
"""Per-element transfer cost in model time units."""

# Experiment protocol
DEFAULT_PROGRESS_FRACTIONS: Tuple[float, ...] = (0.2, 0.5, 0.8)
"""Fractions of the reference iteration count at which failures fire."""
FAILURE_LOCATIONS: Tuple[str, ...] = ("start", "center")
"""Where contiguous failed ranks are placed."""
DEFAULT_REPETITIONS: int = 1
"""Repetitions of each experiment cell."""
DEFAULT_SEED: int = 0
"""Seed for the random right-hand side."""
RHS_KINDS: Tuple[str, ...] = ("random", "ones")
"""How the right-hand side b = A x* is formed."""

# Recovery
RECOVERY_STAGES: Tuple[str, ...] = ("gather", "reconstruct_p_z", "reconstruct_r",
                                    "reconstruct_x", "finalize")
"""Ordered reconstruction stages; overlapping failures are checked between them."""
DEFAULT_OVERLAP_STAGE: str = "reconstruct_r"
"""Stage before which a during-reconstruction failure fires by default."""

# Reporting
REPORT_SCHEMA_VERSION: int = 1
"""Version stamped into JSON reports."""
REPORT_FORMATS: Tuple[str, ...] = ("json", "csv")
"""Supported report serializations."""

# Runtime configuration
DYNAMIC_MODE: bool = False
"""Enable per-iteration and per-message debug logging."""

# Exit codes
EXIT_SUCCESS: int = 0
EXIT_SOLVER_FAILURE: int = 1
EXIT_UNRECOVERABLE: int = 2
EXIT_USAGE: int = 3


def validate_parameters() -> None:
    """Validate the configuration parameters to ensure consistency."""
    if not 0.0 < DEFAULT_REL_TOLERANCE < 1.0:
        raise ValueError(f"DEFAULT_REL_TOLERANCE must lie in (0, 1), got {DEFAULT_REL_TOLERANCE}")
    if not 0.0 < DEFAULT_INNER_TOLERANCE < 1.0:
        raise ValueError(f"DEFAULT_INNER_TOLERANCE must lie in (0, 1), got {DEFAULT_INNER_TOLERANCE}")

    if MAX_ITERATIONS < 1 or INNER_MAX_ITERATIONS < 1:
        raise ValueError("Iteration caps must be positive")

    if DIRECT_SOLVE_THRESHOLD < 0:
        raise ValueError(f"DIRECT_SOLVE_THRESHOLD must be non-negative, got {DIRECT_SOLVE_THRESHOLD}")

    if DEFAULT_LATENCY < 0.0:
        raise ValueError(f"DEFAULT_LATENCY must be non-negative, got {DEFAULT_LATENCY}")
    if DEFAULT_BANDWIDTH_COST <= 0.0:
        raise ValueError(f"DEFAULT_BANDWIDTH_COST must be positive, got {DEFAULT_BANDWIDTH_COST}")

    for fraction in DEFAULT_PROGRESS_FRACTIONS:
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"Progress fraction {fraction} outside (0, 1)")

    if len(set(RECOVERY_STAGES)) != len(RECOVERY_STAGES):
        raise ValueError("Duplicate stages found in RECOVERY_STAGES")
    if DEFAULT_OVERLAP_STAGE not in RECOVERY_STAGES:
        raise ValueError(
            f"DEFAULT_OVERLAP_STAGE {DEFAULT_OVERLAP_STAGE!r} not in RECOVERY_STAGES. "
            f"Check RECOVERY_STAGES for the stage names."
        )

    exit_codes = [EXIT_SUCCESS, EXIT_SOLVER_FAILURE, EXIT_UNRECOVERABLE, EXIT_USAGE]
    if len(set(exit_codes)) != len(exit_codes):
        raise ValueError("Exit codes must be distinct")

# Run validation on module import
validate_parameters()

if __name__ == "__main__":
    print("Configuration parameters for the resilient PCG simulator:")
    print(f"  Relative tolerance: {DEFAULT_REL_TOLERANCE}")
    print(f"  Inner tolerance: {DEFAULT_INNER_TOLERANCE}")
    print(f"  Direct solve threshold: {DIRECT_SOLVE_THRESHOLD}")
    print(f"  Latency / bandwidth cost: {DEFAULT_LATENCY} / {DEFAULT_BANDWIDTH_COST}")
    print(f"  Progress fractions: {DEFAULT_PROGRESS_FRACTIONS}")
    print("\nFor detailed testing, run: python3 -m unittest tests/test_parameters.py")
    sys.exit(0)
