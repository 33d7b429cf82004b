#!/usr/bin/env python3

"""Exact reconstruction of the PCG state lost with one or more failed nodes."""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np

import parameters
from cluster import CURRENT, PREVIOUS, BackupSegment, ClusterState, FailureEvent
from matrices import (DimensionError, SparseMatrix, direct_solve, extract_submatrix, spmv,
                      vstack_rows)
from solver import ConvergenceError, SolverConfig, preconditioned_cg


class UnrecoverableFailureError(RuntimeError):
    """
    Some lost search-direction element has no surviving copy, or more than ρ
    nodes are down at once.

    Args:
        message: Diagnostic text.
        missing: (owner, element, age) triples without a surviving copy.
    """

    def __init__(self, message: str, missing: Optional[List[Tuple[int, int, int]]] = None):
        super().__init__(message)
        self.missing = missing or []
        self.report: Optional["RecoveryReport"] = None


class RecoveryError(RuntimeError):
    """The inner subsystem solve did not converge."""

    def __init__(self, message: str, inner_residual: float):
        super().__init__(message)
        self.inner_residual = inner_residual


@dataclass
class RecoveryTask:
    """Everything gathered from survivors to rebuild the state on the index set I_f."""
    failed: FrozenSet[int]
    indices: np.ndarray
    iteration: int = 0
    beta_prev: float = 0.0
    scalars: Dict[str, float] = field(default_factory=dict)
    blocks: List[Tuple[int, int]] = field(default_factory=list)
    """Per failed node, its range within I_f."""
    diagonal_blocks: List[Optional[SparseMatrix]] = field(default_factory=list)
    """Per failed node, M_ff for block Jacobi; None for identity."""
    rows: Optional[SparseMatrix] = None
    rhs: Optional[np.ndarray] = None
    x_halo: Optional[np.ndarray] = None
    """Surviving x at the columns of A_{I_f,:} outside I_f, zero elsewhere."""
    p_current: Optional[np.ndarray] = None
    p_previous: Optional[np.ndarray] = None
    inner_tolerance: float = parameters.DEFAULT_INNER_TOLERANCE
    holders: Dict[int, int] = field(default_factory=dict)
    """Elements delivered per surviving holder."""
    z: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    inner_iterations: int = 0
    solve_method: str = "none"

    @property
    def empty(self) -> bool:
        return not self.failed


@dataclass
class RecoveryReport:
    failed: List[int]
    iteration: int
    reconstructed: bool = False
    restarted_count: int = 0
    inner_iterations: int = 0
    solve_method: str = "none"
    deviations: Dict[str, float] = field(default_factory=dict)
    max_deviation: Optional[float] = None
    messages: int = 0
    elements: int = 0
    model_time: float = 0.0
    reseeded_elements: int = 0
    diagnostic: str = ""

    def to_dict(self) -> Dict:
        return {
            "failed": list(self.failed),
            "iteration": self.iteration,
            "reconstructed": self.reconstructed,
            "restarted_count": self.restarted_count,
            "inner_iterations": self.inner_iterations,
            "solve_method": self.solve_method,
            "deviations": dict(self.deviations),
            "max_deviation": self.max_deviation,
            "messages": self.messages,
            "elements": self.elements,
            "model_time": self.model_time,
            "reseeded_elements": self.reseeded_elements,
            "diagnostic": self.diagnostic,
        }


def gather_surviving(cluster: ClusterState, failed: Iterable[int],
                     inner_tolerance: float = parameters.DEFAULT_INNER_TOLERANCE) -> RecoveryTask:
    """
    Collect static data, surviving x values and backup copies of both search directions.

    Each element is fetched from its lowest-id surviving holder.

    Raises:
        UnrecoverableFailureError: No survivor is left, or an element of
            p^(j) or p^(j-1) on I_f has no surviving copy.
    """
    failed = frozenset(failed)
    task = RecoveryTask(failed, cluster.partition.union_indices(failed), inner_tolerance=inner_tolerance)
    if task.empty:
        return task
    survivors = cluster.survivors()
    if not survivors:
        raise UnrecoverableFailureError("No surviving node is left to recover from")

    replacements = [cluster.nodes[f] for f in sorted(failed)]
    offset = 0
    for node in replacements:
        task.blocks.append((offset, offset + node.size))
        task.diagonal_blocks.append(node.static.diagonal_block if node.static.factor is not None else None)
        offset += node.size
    task.rows = vstack_rows([node.static.rows for node in replacements])
    task.rhs = np.concatenate([node.static.rhs for node in replacements])

    task.scalars = {name: value for name, value in survivors[0].scalars.items()}
    task.iteration = int(task.scalars.get("iteration", 0))
    task.beta_prev = task.scalars.get("beta_prev", 0.0)
    coordinator = min(failed)
    transfers: List[Tuple[int, int, int]] = []

    halo = np.setdiff1d(task.rows.row_columns(), task.indices, assume_unique=True)
    task.x_halo = np.zeros(cluster.partition.n)
    halo_owners = cluster.partition.owners(halo)
    for owner in np.unique(halo_owners):
        columns = halo[halo_owners == owner]
        task.x_halo[columns] = cluster.nodes[owner].local("x", columns)
        transfers.append((int(owner), coordinator, len(columns)))

    missing: List[Tuple[int, int, int]] = []
    ages = [CURRENT] if task.iteration == 0 else [CURRENT, PREVIOUS]
    retrieved = {CURRENT: np.empty(len(task.indices)), PREVIOUS: np.zeros(len(task.indices))}
    for (lo, hi), node in zip(task.blocks, replacements):
        owned = task.indices[lo:hi]
        for age in ages:
            holders = cluster.locate_copies(node.node_id, age, owned)
            lost = owned[holders < 0]
            missing.extend((node.node_id, int(s), age) for s in lost)
            if len(lost):
                continue
            retrieved[age][lo:hi] = cluster.fetch_copies(node.node_id, age, owned, holders)
            for holder, count in zip(*np.unique(holders, return_counts=True)):
                task.holders[int(holder)] = task.holders.get(int(holder), 0) + int(count)
                transfers.append((int(holder), node.node_id, int(count)))

    if missing:
        raise UnrecoverableFailureError(
            f"{len(missing)} search-direction elements of nodes {sorted(failed)} have no surviving copy",
            missing)
    task.p_current = retrieved[CURRENT]
    task.p_previous = retrieved[PREVIOUS]
    cluster.charge_recovery(transfers)
    logging.info("Gathered state for nodes %s at iteration %d from holders %s",
                 sorted(failed), task.iteration, sorted(task.holders))
    return task


def reconstruct_p_z(task: RecoveryTask) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """z_f = p_f^(j) - β^(j-1) p_f^(j-1), elementwise."""
    if task.empty:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    task.z = task.p_current - task.beta_prev * task.p_previous
    return task.p_current, task.p_previous, task.z


def reconstruct_r(task: RecoveryTask) -> np.ndarray:
    """
    r_f from z_f = M⁻¹ r on I_f.

    M is block diagonal over the node partition, so each failed block gives
    r_f = M_ff z_f, and r_f = z_f for the identity preconditioner.
    """
    if task.empty:
        return np.zeros(0)
    if task.z is None:
        raise ValueError("z must be reconstructed before r")
    r = np.empty_like(task.z)
    for (lo, hi), block in zip(task.blocks, task.diagonal_blocks):
        r[lo:hi] = task.z[lo:hi] if block is None else spmv(block, task.z[lo:hi])
    task.r = r
    return r


def reconstruct_x(task: RecoveryTask, config: SolverConfig) -> np.ndarray:
    """
    Solve A_{I_f,I_f} x_f = b_f - r_f - A_{I_f,I\\I_f} x on the extracted submatrix.

    Dense Cholesky up to config.direct_threshold rows, block-Jacobi PCG beyond.

    Raises:
        RecoveryError: The inner PCG hit its cap; carries the inner residual.
    """
    if task.empty:
        return np.zeros(0)
    if task.r is None:
        raise ValueError("r must be reconstructed before x")
    coupling = spmv(task.rows, task.x_halo)
    w = task.rhs - task.r - coupling
    subsystem = extract_submatrix(task.rows, np.arange(len(task.indices)), task.indices)

    if len(task.indices) <= config.direct_threshold:
        task.x = direct_solve(subsystem, w)
        task.solve_method = "direct"
        task.inner_iterations = 0
    else:
        try:
            task.x, task.inner_iterations, _ = preconditioned_cg(
                subsystem, w, task.blocks, task.inner_tolerance,
                config.inner_max_iterations, config.inner_preconditioner)
        except ConvergenceError as exc:
            raise RecoveryError(f"Subsystem solve over {len(task.indices)} rows failed: {exc}",
                                exc.residual) from exc
        task.solve_method = "iterative"
    if parameters.DYNAMIC_MODE:
        logging.debug("Subsystem of %d rows solved (%s, %d inner iterations)",
                      len(task.indices), task.solve_method, task.inner_iterations)
    return task.x


def _charge_subsystem_solve(cluster: ClusterState, task: RecoveryTask) -> None:
    """Replacements exchange their blocks once per inner iteration, or gather/scatter for Cholesky."""
    ordered = sorted(task.failed)
    if len(ordered) < 2:
        return
    sizes = {node_id: hi - lo for node_id, (lo, hi) in zip(ordered, task.blocks)}
    if task.solve_method == "direct":
        coordinator = ordered[0]
        cluster.charge_recovery([(f, coordinator, sizes[f]) for f in ordered[1:]])
        cluster.charge_recovery([(coordinator, f, sizes[f]) for f in ordered[1:]])
        return
    exchange = [(f, g, sizes[f]) for f in ordered for g in ordered if f != g]
    for _ in range(task.inner_iterations):
        cluster.charge_recovery(exchange)


def finalize_recovery(cluster: ClusterState, task: RecoveryTask) -> RecoveryReport:
    """
    Install the rebuilt state, recompute u = A p on the replacements and re-seed backups.

    Both search-direction generations are re-sent to every replacement that is a
    receiver of some owner, so each element is again held by ρ+1 nodes. Re-seeded
    elements count as extra elements.
    """
    report = RecoveryReport(sorted(task.failed), task.iteration)
    if task.empty:
        report.reconstructed = True
        return report

    for (lo, hi), node_id in zip(task.blocks, sorted(task.failed)):
        node = cluster.nodes[node_id]
        node.x = task.x[lo:hi].copy()
        node.r = task.r[lo:hi].copy()
        node.z = task.z[lo:hi].copy()
        node.p = task.p_current[lo:hi].copy()
        node.p_prev = task.p_previous[lo:hi].copy()
        node.scalars = dict(task.scalars)

    cluster.complete_recovery(task.failed)

    transfers = []
    for node_id in sorted(task.failed):
        node = cluster.nodes[node_id]
        columns = node.static.rows.row_columns()
        owners = cluster.partition.owners(columns)
        ghost = np.zeros(cluster.partition.n)
        for owner in np.unique(owners):
            wanted = columns[owners == owner]
            ghost[wanted] = cluster.nodes[owner].local("p", wanted)
            transfers.append((int(owner), node_id, len(wanted)))
        node.u = spmv(node.static.rows, ghost)
    cluster.charge_recovery(transfers)

    transfers = []
    reseeded = 0
    ages = [CURRENT] if task.iteration == 0 else [CURRENT, PREVIOUS]
    for receiver_id in sorted(task.failed):
        receiver = cluster.nodes[receiver_id]
        for owner in cluster.live_nodes():
            if owner.node_id == receiver_id:
                continue
            needed, extra = cluster.payload(owner.node_id, receiver_id)
            sent = np.union1d(needed, extra)
            if not len(sent):
                continue
            for age in ages:
                name = "p" if age == CURRENT else "p_prev"
                receiver.backups[(owner.node_id, age)] = BackupSegment(sent, owner.local(name, sent).copy())
                reseeded += len(sent)
            transfers.append((owner.node_id, receiver_id, len(sent) * len(ages)))
    cluster.charge_recovery(transfers)
    cluster.stats.extra_elements += reseeded

    report.reconstructed = True
    report.inner_iterations = task.inner_iterations
    report.solve_method = task.solve_method
    report.reseeded_elements = reseeded
    return report


def handle_overlapping(cluster: ClusterState, failed: Iterable[int],
                       event: FailureEvent) -> FrozenSet[int]:
    """
    Absorb a failure that arrives mid-reconstruction.

    Survivors and in-flight replacements named by the event are failed, fresh
    replacements provisioned, and the enlarged failed set returned so recovery
    restarts from the gather stage.

    Raises:
        UnrecoverableFailureError: The enlarged set exceeds ρ.
    """
    enlarged = frozenset(failed) | frozenset(event.nodes)
    if len(enlarged) > cluster.redundancy:
        raise UnrecoverableFailureError(
            f"{len(enlarged)} concurrent failures {sorted(enlarged)} exceed redundancy {cluster.redundancy}")
    cluster.inject_failures(event.nodes)
    cluster.provision_replacements(event.nodes)
    logging.warning("Nodes %s failed during reconstruction; restarting over %s",
                    sorted(event.nodes), sorted(enlarged))
    return enlarged


def _deviations(cluster: ClusterState, indices: np.ndarray,
                truth: Dict[str, np.ndarray]) -> Dict[str, float]:
    deviations = {}
    for name, reference in truth.items():
        expected = reference[indices]
        error = np.linalg.norm(cluster.global_vector(name)[indices] - expected)
        scale = np.linalg.norm(expected)
        deviations[name] = float(error / scale) if scale > 0.0 else float(error)
    return deviations


def run_recovery(cluster: ClusterState, failed: Iterable[int], config: SolverConfig,
                 pending: Sequence[FailureEvent] = (),
                 ground_truth: Optional[Dict[str, np.ndarray]] = None) -> RecoveryReport:
    """
    Drive the reconstruction stages for freshly failed nodes.

    Overlapping events fire just before their stage and restart recovery over
    the enlarged failed set.

    Args:
        cluster: Cluster whose failed nodes are already erased.
        failed: Nodes that just failed.
        config: Supplies the inner-solve settings.
        pending: Failures that will strike during this reconstruction.
        ground_truth: Global state captured before the failure; enables the
            deviation audit.

    Raises:
        UnrecoverableFailureError: Carries a report with reconstructed = False.
        RecoveryError: The inner solve failed.
    """
    failed = frozenset(failed)
    before = cluster.stats.snapshot()
    pending = list(pending)
    restarts = 0
    task = None
    try:
        cluster.provision_replacements(failed)
        stage_index = 0
        while stage_index < len(parameters.RECOVERY_STAGES):
            stage = parameters.RECOVERY_STAGES[stage_index]
            due = [event for event in pending if event.stage == stage]
            if due:
                for event in due:
                    pending.remove(event)
                    failed = handle_overlapping(cluster, failed, event)
                    restarts += 1
                stage_index = 0
                continue
            if stage == "gather":
                task = gather_surviving(cluster, failed, config.inner_tolerance)
            elif stage == "reconstruct_p_z":
                reconstruct_p_z(task)
            elif stage == "reconstruct_r":
                reconstruct_r(task)
            elif stage == "reconstruct_x":
                reconstruct_x(task, config)
                _charge_subsystem_solve(cluster, task)
            elif stage == "finalize":
                report = finalize_recovery(cluster, task)
            stage_index += 1
    except UnrecoverableFailureError as exc:
        iteration = task.iteration if task is not None else cluster.iteration
        exc.report = RecoveryReport(sorted(failed), iteration, reconstructed=False,
                                    restarted_count=restarts, diagnostic=str(exc))
        logging.error("Recovery of nodes %s failed: %s", sorted(failed), exc)
        raise

    report.restarted_count = restarts
    report.messages = cluster.stats.recovery_messages - before.recovery_messages
    report.elements = cluster.stats.recovery_elements - before.recovery_elements
    report.model_time = cluster.stats.recovery_model_time - before.recovery_model_time
    if ground_truth is not None and not task.empty:
        report.deviations = _deviations(cluster, task.indices, ground_truth)
        report.max_deviation = max(report.deviations.values())
    cluster.trace.record("recovery", iteration=report.iteration, nodes=report.failed,
                         restarts=restarts, messages=report.messages,
                         model_time=report.model_time, max_deviation=report.max_deviation)
    logging.info("Recovered nodes %s at iteration %d (%d restarts, %s solve)",
                 report.failed, report.iteration, restarts, report.solve_method)
    return report


def relative_residual_difference(solver_residual: np.ndarray, matrix: SparseMatrix,
                                 x: np.ndarray, rhs: np.ndarray) -> Optional[float]:
    """
    (‖r_solver‖₂ - ‖b - A x‖₂) / ‖b - A x‖₂; None when b - A x vanishes.

    Raises:
        DimensionError: Vector lengths disagree with the matrix.
    """
    solver_residual = np.asarray(solver_residual, dtype=np.float64)
    if solver_residual.shape != (matrix.n_rows,) or np.shape(rhs) != (matrix.n_rows,):
        raise DimensionError("Residual, right-hand side and matrix disagree")
    true_norm = np.linalg.norm(np.asarray(rhs, dtype=np.float64) - spmv(matrix, x))
    if true_norm == 0.0:
        return None
    return float((np.linalg.norm(solver_residual) - true_norm) / true_norm)
