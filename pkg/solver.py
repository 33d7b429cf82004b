#!/usr/bin/env python3

"""Distributed preconditioned conjugate gradients on the simulated cluster."""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
import scipy.sparse.linalg as spla

import parameters
from cluster import ClusterState, CommStats, FailureSchedule, NodeFailedError, NodeState
from matrices import CholeskyFactor, DimensionError, SparseMatrix, extract_submatrix, spmv


class BreakdownError(RuntimeError):
    """Non-positive curvature pᵀAp or a non-finite scalar: the system is not SPD."""


class ConvergenceError(RuntimeError):
    """Iteration cap reached before the requested residual reduction."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class SolverConfig:
    rel_tolerance: float = parameters.DEFAULT_REL_TOLERANCE
    max_iterations: int = parameters.MAX_ITERATIONS
    preconditioner: str = "block-jacobi"
    redundancy: int = 0
    inner_tolerance: float = parameters.DEFAULT_INNER_TOLERANCE
    inner_max_iterations: int = parameters.INNER_MAX_ITERATIONS
    inner_preconditioner: str = "exact"
    direct_threshold: int = parameters.DIRECT_SOLVE_THRESHOLD

    def validate(self, node_count: Optional[int] = None) -> None:
        """
        Raises:
            ValueError: A tolerance outside (0, 1), an unknown preconditioner,
                a negative cap, or ρ not below node_count.
        """
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValueError(f"rel_tolerance must lie in (0, 1), got {self.rel_tolerance}")
        if not 0.0 < self.inner_tolerance < 1.0:
            raise ValueError(f"inner_tolerance must lie in (0, 1), got {self.inner_tolerance}")
        if self.max_iterations < 0 or self.inner_max_iterations < 1:
            raise ValueError("Iteration caps must be non-negative")
        if self.preconditioner not in parameters.PRECONDITIONERS:
            raise ValueError(f"Unknown preconditioner {self.preconditioner!r}")
        if self.inner_preconditioner not in parameters.INNER_PRECONDITIONERS:
            raise ValueError(f"Unknown inner preconditioner {self.inner_preconditioner!r}")
        if self.direct_threshold < 0:
            raise ValueError("direct_threshold must be non-negative")
        if self.redundancy < 0 or (node_count is not None and self.redundancy >= node_count):
            raise ValueError(f"Redundancy {self.redundancy} must lie in [0, {node_count})")


@dataclass
class IterationTrace:
    """residual_norms[j] is ‖r^(j)‖₂; alphas[j], betas[j] are the scalars of step j -> j+1."""
    residual_norms: List[float] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    betas: List[float] = field(default_factory=list)
    events: List[Dict] = field(default_factory=list)

    def mark(self, iteration: int, kind: str, **details) -> None:
        self.events.append({"iteration": iteration, "kind": kind, **details})


@dataclass
class SolverState:
    iteration: int
    initial_residual_norm: float
    residual_norm: float
    trace: IterationTrace

    def converged(self, rel_tolerance: float) -> bool:
        return self.residual_norm <= rel_tolerance * self.initial_residual_norm


@dataclass
class RunReport:
    """Outcome, counters and diagnostics of one solver run."""
    label: str = ""
    status: str = "pending"
    converged: bool = False
    iterations: int = 0
    residual_norm: float = 0.0
    initial_residual_norm: float = 0.0
    true_residual_norm: Optional[float] = None
    residual_difference: Optional[float] = None
    diagnostic: str = ""
    node_count: int = 0
    redundancy: int = 0
    failures: int = 0
    location: str = "none"
    progress: Optional[float] = None
    trigger_iteration: Optional[int] = None
    stats: CommStats = field(default_factory=CommStats)
    recoveries: List = field(default_factory=list)
    trace: IterationTrace = field(default_factory=IterationTrace)
    reference_residual_difference: Optional[float] = None
    reference_iterations: Optional[int] = None
    overhead_elements: Optional[float] = None
    overhead_undisturbed: Optional[float] = None
    reconstruction_time: Optional[float] = None
    overhead_with_failures: Optional[float] = None
    wall_clock: float = 0.0
    solution: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def total_model_time(self) -> float:
        return self.stats.model_time + self.stats.recovery_model_time

    @property
    def max_deviation(self) -> Optional[float]:
        values = [r.max_deviation for r in self.recoveries if r.max_deviation is not None]
        return max(values) if values else None

    def to_dict(self, include_wall_clock: bool = False) -> Dict:
        """Plain-data view for JSON emission; the solution vector is omitted."""
        data = {
            "label": self.label,
            "status": self.status,
            "converged": self.converged,
            "iterations": self.iterations,
            "node_count": self.node_count,
            "redundancy": self.redundancy,
            "failures": self.failures,
            "location": self.location,
            "progress": self.progress,
            "trigger_iteration": self.trigger_iteration,
            "residual_norm": self.residual_norm,
            "initial_residual_norm": self.initial_residual_norm,
            "true_residual_norm": self.true_residual_norm,
            "residual_difference": self.residual_difference,
            "reference_residual_difference": self.reference_residual_difference,
            "reference_iterations": self.reference_iterations,
            "overhead_elements": self.overhead_elements,
            "overhead_undisturbed": self.overhead_undisturbed,
            "reconstruction_time": self.reconstruction_time,
            "overhead_with_failures": self.overhead_with_failures,
            "max_deviation": self.max_deviation,
            "total_model_time": self.total_model_time,
            "stats": self.stats.to_dict(),
            "recoveries": [r.to_dict() for r in self.recoveries],
            "trace": asdict(self.trace),
            "diagnostic": self.diagnostic,
        }
        if include_wall_clock:
            data["wall_clock"] = self.wall_clock
        return data


def apply_preconditioner(node: NodeState, residual: np.ndarray) -> np.ndarray:
    """
    z_i = M_ii⁻¹ r_i by the node's exact block factorization, or a copy for identity.

    Raises:
        NodeFailedError: The node holds no static data.
    """
    if node.static is None:
        raise NodeFailedError(f"Node {node.node_id} has no preconditioner data")
    if node.static.factor is None:
        return np.array(residual, dtype=np.float64, copy=True)
    return node.static.factor.solve(residual)


def _local_dots(cluster: ClusterState) -> Dict[int, np.ndarray]:
    return {node.node_id: np.array([np.dot(node.r, node.z), np.dot(node.r, node.r)])
            for node in cluster.live_nodes()}


def pcg_init(cluster: ClusterState, config: SolverConfig) -> SolverState:
    """
    Set r⁰ = b (x⁰ = 0), z⁰ = M⁻¹r⁰, p⁰ = z⁰ and exchange p⁰.

    p^(-1) is zero and β^(-1) = 0, so reconstruction at iteration 0 needs no history.
    """
    config.validate(cluster.node_count)
    if config.redundancy != cluster.redundancy:
        raise ValueError(f"Solver redundancy {config.redundancy} differs from the "
                         f"cluster plan's {cluster.redundancy}")
    cluster.iteration = 0
    for node in cluster.live_nodes():
        node.x = np.zeros(node.size)
        node.r = node.static.rhs.copy()
        node.z = apply_preconditioner(node, node.r)
        node.p = node.z.copy()
        node.p_prev = np.zeros(node.size)
        node.scalars["beta_prev"] = 0.0
        node.scalars["iteration"] = 0

    dots = cluster.allreduce_sum(_local_dots(cluster), names=("rz", "rr"))
    if not np.all(np.isfinite(dots)):
        raise BreakdownError("Non-finite initial residual")
    cluster.exchange_spmv()

    residual = math.sqrt(float(dots[1]))
    trace = IterationTrace(residual_norms=[residual])
    logging.info("PCG initialised: ||r0|| = %.6e", residual)
    return SolverState(0, residual, residual, trace)


def pcg_step(cluster: ClusterState, state: SolverState) -> SolverState:
    """
    Advance one PCG iteration.

    α = rᵀz / pᵀAp and β = r'ᵀz' / rᵀz are reduced over all nodes in fixed order,
    so every node holds bitwise-identical scalars.

    Raises:
        BreakdownError: pᵀAp <= 0 or a non-finite reduction.
    """
    live = cluster.live_nodes()
    curvature = cluster.allreduce_sum({node.node_id: np.dot(node.p, node.u) for node in live},
                                      names=("pAp",))
    if not math.isfinite(curvature) or curvature <= 0.0:
        raise BreakdownError(f"Non-positive curvature pᵀAp = {curvature} at iteration {state.iteration}")
    rz = cluster.scalar("rz")
    alpha = rz / curvature

    for node in live:
        node.x = node.x + alpha * node.p
        node.r = node.r - alpha * node.u
        node.z = apply_preconditioner(node, node.r)

    dots = cluster.allreduce_sum(_local_dots(cluster), names=("rz", "rr"))
    if not np.all(np.isfinite(dots)):
        raise BreakdownError(f"Non-finite residual at iteration {state.iteration + 1}")
    beta = float(dots[0]) / rz

    for node in live:
        node.p_prev = node.p
        node.p = node.z + beta * node.p
        node.scalars["alpha"] = alpha
        node.scalars["beta_prev"] = beta
        node.scalars["iteration"] = state.iteration + 1

    cluster.iteration = state.iteration + 1
    cluster.exchange_spmv()

    state.iteration += 1
    state.residual_norm = math.sqrt(float(dots[1]))
    state.trace.alphas.append(alpha)
    state.trace.betas.append(beta)
    state.trace.residual_norms.append(state.residual_norm)
    if parameters.DYNAMIC_MODE:
        logging.debug("Iteration %d: ||r|| = %.6e, alpha = %.6e, beta = %.6e",
                      state.iteration, state.residual_norm, alpha, beta)
    return state


def pcg_run(cluster: ClusterState, config: SolverConfig,
            schedule: Optional[FailureSchedule] = None, audit: bool = False,
            validate_schedule: bool = True, label: str = "") -> RunReport:
    """
    Iterate to convergence, reconstructing lost state whenever a scheduled failure fires.

    Failures fire at iteration boundaries, before the convergence test; the run
    resumes at the same iteration index after recovery.

    Args:
        cluster: Freshly built cluster.
        config: Solver configuration.
        schedule: Failures to inject; empty means a failure-free run.
        audit: Snapshot the global state before each failure and record the
            deviation of the reconstructed state in each RecoveryReport.
        validate_schedule: Reject schedules exceeding the redundancy degree up front.
        label: Run name copied into the report.

    Returns:
        The run report; runtime failures are recorded in its status, not raised.

    Raises:
        ScheduleError: The schedule is invalid and validate_schedule is set.
    """
    # Import locally to avoid circular imports
    from recovery import RecoveryError, UnrecoverableFailureError, relative_residual_difference, run_recovery

    schedule = schedule or FailureSchedule()
    if validate_schedule:
        schedule.validate(cluster.node_count, config.redundancy)
    pending: Dict[int, List] = {}
    for group in schedule.groups():
        pending.setdefault(group.trigger.iteration, []).append(group)

    report = RunReport(label=label, node_count=cluster.node_count, redundancy=cluster.redundancy)
    started = time.perf_counter()
    state = None
    try:
        state = pcg_init(cluster, config)
        while True:
            for group in pending.pop(state.iteration, []):
                truth = cluster.snapshot_state() if audit else None
                state.trace.mark(state.iteration, "failure", nodes=list(group.trigger.nodes))
                cluster.inject_failures(group.trigger.nodes)
                outcome = run_recovery(cluster, group.trigger.nodes, config,
                                       pending=group.overlaps, ground_truth=truth)
                report.recoveries.append(outcome)
                state.trace.mark(state.iteration, "recovery", nodes=outcome.failed,
                                 restarts=outcome.restarted_count)
            if state.converged(config.rel_tolerance):
                report.status = "converged"
                break
            if state.iteration >= config.max_iterations:
                report.status = "max-iterations"
                report.diagnostic = f"No convergence within {config.max_iterations} iterations"
                break
            pcg_step(cluster, state)
    except BreakdownError as exc:
        report.status = "breakdown"
        report.diagnostic = str(exc)
        logging.error("Run %r: %s", label, exc)
    except UnrecoverableFailureError as exc:
        report.status = "unrecoverable"
        report.diagnostic = str(exc)
        if exc.report is not None:
            report.recoveries.append(exc.report)
        logging.error("Run %r: %s", label, exc)
    except RecoveryError as exc:
        report.status = "recovery-error"
        report.diagnostic = str(exc)
        logging.error("Run %r: %s", label, exc)

    if pending:
        logging.warning("Run %r: failures scheduled at iterations %s never fired",
                        label, sorted(pending))
    report.wall_clock = time.perf_counter() - started
    report.stats = cluster.stats.snapshot()
    report.converged = report.status == "converged"
    if state is not None:
        report.iterations = state.iteration
        report.residual_norm = state.residual_norm
        report.initial_residual_norm = state.initial_residual_norm
        report.trace = state.trace
    if report.status in ("converged", "max-iterations"):
        report.solution = cluster.global_vector("x")
        true_residual = cluster.rhs - spmv(cluster.matrix, report.solution)
        report.true_residual_norm = float(np.linalg.norm(true_residual))
        report.residual_difference = relative_residual_difference(
            cluster.global_vector("r"), cluster.matrix, report.solution, cluster.rhs)
    logging.info("Run %r finished: %s after %d iterations", label, report.status, report.iterations)
    return report


class _BlockSolver:
    """Exact Cholesky or incomplete LU of each diagonal block of a serial matrix."""

    def __init__(self, matrix: SparseMatrix, blocks: Sequence[Tuple[int, int]], kind: str):
        self.blocks = list(blocks)
        self.solvers = []
        for start, end in self.blocks:
            owned = np.arange(start, end)
            block = extract_submatrix(matrix, owned, owned)
            if kind == "exact":
                self.solvers.append(CholeskyFactor(block).solve)
            elif kind == "ilu":
                ilu = spla.spilu(block.to_scipy().tocsc(), drop_tol=parameters.ILU_DROP_TOLERANCE,
                                 fill_factor=parameters.ILU_FILL_FACTOR)
                self.solvers.append(ilu.solve)
            else:
                raise ValueError(f"Unknown block solver {kind!r}")

    def __call__(self, residual: np.ndarray) -> np.ndarray:
        out = np.empty_like(residual)
        for (start, end), solve in zip(self.blocks, self.solvers):
            out[start:end] = solve(residual[start:end])
        return out


def preconditioned_cg(matrix: SparseMatrix, rhs: np.ndarray,
                      blocks: Optional[Sequence[Tuple[int, int]]] = None,
                      rel_tolerance: float = parameters.DEFAULT_INNER_TOLERANCE,
                      max_iterations: int = parameters.INNER_MAX_ITERATIONS,
                      block_solver: str = "exact") -> Tuple[np.ndarray, int, float]:
    """
    Serial block-Jacobi PCG from a zero initial guess.

    Args:
        matrix: SPD matrix.
        rhs: Right-hand side.
        blocks: Diagonal block ranges; the whole matrix is one block when None.
        rel_tolerance: Required reduction of the residual norm.
        max_iterations: Iteration cap.
        block_solver: "exact" (Cholesky) or "ilu" (scipy spilu) per block.

    Returns:
        (solution, iterations, final residual norm).

    Raises:
        ConvergenceError: The cap is reached first; carries the residual.
        BreakdownError: Non-positive curvature.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if matrix.n_rows != matrix.n_cols or rhs.shape != (matrix.n_rows,):
        raise DimensionError(f"System {matrix.shape} with rhs {rhs.shape}")
    if blocks is None:
        blocks = [(0, matrix.n_rows)]
    precondition = _BlockSolver(matrix, blocks, block_solver)

    x = np.zeros_like(rhs)
    r = rhs.copy()
    norm0 = np.linalg.norm(r)
    if norm0 == 0.0:
        return x, 0, 0.0
    z = precondition(r)
    p = z.copy()
    gamma = np.dot(r, z)
    for iteration in range(1, max_iterations + 1):
        ap = spmv(matrix, p)
        curvature = np.dot(p, ap)
        if curvature <= 0.0 or not math.isfinite(curvature):
            raise BreakdownError(f"Inner solver curvature {curvature} at iteration {iteration}")
        alpha = gamma / curvature
        x += alpha * p
        r -= alpha * ap
        norm = np.linalg.norm(r)
        if norm <= rel_tolerance * norm0:
            return x, iteration, float(norm)
        z = precondition(r)
        gamma_old = gamma
        gamma = np.dot(r, z)
        p = z + (gamma / gamma_old) * p
    raise ConvergenceError(f"Inner solver stalled at relative residual {norm / norm0:.3e} "
                           f"after {max_iterations} iterations", float(norm), max_iterations)
