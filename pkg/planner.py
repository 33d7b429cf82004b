#!/usr/bin/env python3

"""Communication pattern of the distributed SpMV and placement of redundant search-direction copies."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Tuple, Union
import logging
import math

import numpy as np

import parameters
from matrices import BlockRowPartition, DimensionError, SparseMatrix

Pair = Tuple[int, int]

_EMPTY = np.zeros(0, dtype=np.int64)
_EMPTY.setflags(write=False)


class PlanError(ValueError):
    """Redundancy degree or round index outside the admissible range."""


def _frozen_indices(values) -> np.ndarray:
    out = np.array(values, dtype=np.int64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CommPattern:
    """
    Elements of each owner's search-direction block that the SpMV sends to each other node.

    send_sets[(i, k)] is the sorted set S_ik of global indices owned by node i
    that node k needs; only non-empty sets are stored and S_ii never is.
    """
    partition: BlockRowPartition
    send_sets: Dict[Pair, np.ndarray]

    @property
    def node_count(self) -> int:
        return self.partition.node_count

    def send_set(self, owner: int, receiver: int) -> np.ndarray:
        return self.send_sets.get((owner, receiver), _EMPTY)

    def owned_set(self, owner: int) -> np.ndarray:
        return self.partition.indices(owner)

    def receivers(self, owner: int) -> List[int]:
        return sorted(k for (i, k) in self.send_sets if i == owner)

    @cached_property
    def _multiplicities(self) -> Dict[int, np.ndarray]:
        counts = {i: np.zeros(self.partition.size(i), dtype=np.int64)
                  for i in range(self.node_count)}
        for (owner, _), indices in self.send_sets.items():
            counts[owner][indices - self.partition.ranges[owner][0]] += 1
        for array in counts.values():
            array.setflags(write=False)
        return counts

    def multiplicities(self, owner: int) -> np.ndarray:
        """m_i(s) for every s in I_i, in index order."""
        return self._multiplicities[owner]


def compute_send_sets(matrix: SparseMatrix, partition: BlockRowPartition) -> CommPattern:
    """
    Derive the minimal SpMV send sets from the sparsity pattern.

    s belongs to S_ik iff some row of node k stores an entry in column s.

    Raises:
        DimensionError: matrix is not square or does not match the partition.
    """
    if matrix.n_rows != matrix.n_cols or matrix.n_rows != partition.n:
        raise DimensionError(f"Matrix {matrix.shape} does not match a partition of {partition.n} rows")

    send_sets: Dict[Pair, np.ndarray] = {}
    for receiver, (start, end) in enumerate(partition.ranges):
        lo, hi = matrix.row_offsets[start], matrix.row_offsets[end]
        columns = np.unique(matrix.col_indices[lo:hi])
        owners = partition.owners(columns)
        for owner in np.unique(owners):
            if owner == receiver:
                continue
            send_sets[(int(owner), receiver)] = _frozen_indices(columns[owners == owner])

    logging.debug("Communication pattern: %d non-empty send sets over %d nodes",
                  len(send_sets), partition.node_count)
    return CommPattern(partition, send_sets)


def multiplicity(pattern: CommPattern, owner: int, index: int) -> int:
    """
    Number of other nodes the element is sent to during the SpMV.

    Raises:
        ValueError: index is not owned by owner.
    """
    start, end = pattern.partition.ranges[owner]
    if not start <= index < end:
        raise ValueError(f"Element {index} is not owned by node {owner} (owns [{start}, {end}))")
    return int(pattern.multiplicities(owner)[index - start])


def backup_destination(owner: int, round_index: int, node_count: int) -> int:
    """
    Node receiving the round-k backup of owner's block.

    Odd rounds step forward by ceil(k/2), even rounds backward by k/2, modulo N.

    Raises:
        PlanError: round_index outside [1, node_count) or owner out of range.
    """
    if not 0 <= owner < node_count:
        raise PlanError(f"Owner {owner} outside [0, {node_count})")
    if not 1 <= round_index < node_count:
        raise PlanError(f"Round {round_index} outside [1, {node_count - 1}]")
    if round_index % 2 == 1:
        return (owner + (round_index + 1) // 2) % node_count
    return (owner - round_index // 2) % node_count


@dataclass(frozen=True, eq=False)
class RedundancyPlan:
    """Backup destination d_ik and extra element set R_ik^c for every owner i and round k."""
    redundancy: int
    node_count: int
    destinations: Dict[Pair, int]
    extra_sets: Dict[Pair, np.ndarray]
    pattern: Optional[CommPattern] = field(default=None, repr=False)

    def destination(self, owner: int, round_index: int) -> int:
        return self.destinations[(owner, round_index)]

    def extra_set(self, owner: int, round_index: int) -> np.ndarray:
        return self.extra_sets.get((owner, round_index), _EMPTY)

    @cached_property
    def _rounds(self) -> Dict[Pair, int]:
        return {(owner, dest): k for (owner, k), dest in self.destinations.items()}

    def round_for(self, owner: int, receiver: int) -> Optional[int]:
        """Round in which receiver is owner's backup destination, or None."""
        return self._rounds.get((owner, receiver))

    def backup_receivers(self, owner: int) -> List[int]:
        return [self.destinations[(owner, k)] for k in range(1, self.redundancy + 1)]

    def total_extra(self) -> int:
        return int(sum(len(s) for s in self.extra_sets.values()))

    def is_monotone(self) -> bool:
        """True if |R_i1| >= |R_i2| >= ... >= |R_iρ| for every owner.

        Not guaranteed. On tridiag(8) with N=4 and ρ=2, owner 0 has
        |R_01| = 1 and |R_02| = 2, since its first backup receiver already
        gets element 1 through the product.
        """
        for owner in range(self.node_count):
            sizes = [len(self.extra_set(owner, k)) for k in range(1, self.redundancy + 1)]
            if any(a < b for a, b in zip(sizes, sizes[1:])):
                return False
        return True

    def to_json_dict(self) -> Dict:
        return {
            "rho": self.redundancy,
            "destinations": [[i, k, d] for (i, k), d in sorted(self.destinations.items())],
            "extra_sets": [[i, k, self.extra_set(i, k).tolist()]
                           for (i, k) in sorted(self.destinations)],
        }


def compute_redundancy_plan(pattern: CommPattern, redundancy: int,
                            node_count: Optional[int] = None) -> RedundancyPlan:
    """
    Place extra copies so every search-direction element reaches at least ρ other nodes.

    Rounds k = 1..ρ are processed in order. An element joins R_ik^c when it is not
    already sent to d_ik by the SpMV and the number of distinct other nodes it
    reaches so far (its SpMV receivers plus the backup destinations of earlier
    rounds) is still below ρ.

    Args:
        pattern: SpMV send sets.
        redundancy: ρ, the number of tolerated node failures.
        node_count: N; defaults to the pattern's node count and must agree with it.

    Returns:
        The plan, which keeps a reference to the pattern.

    Raises:
        PlanError: ρ negative or not below N.
    """
    node_count = pattern.node_count if node_count is None else node_count
    if node_count != pattern.node_count:
        raise PlanError(f"Plan for {node_count} nodes over a pattern of {pattern.node_count}")
    if not 0 <= redundancy < node_count:
        raise PlanError(f"Redundancy must lie in [0, {node_count - 1}], got {redundancy}")

    destinations: Dict[Pair, int] = {}
    extra_sets: Dict[Pair, np.ndarray] = {}
    for owner in range(node_count):
        owned = pattern.owned_set(owner)
        start = pattern.partition.ranges[owner][0]
        coverage = pattern.multiplicities(owner).copy()
        for k in range(1, redundancy + 1):
            dest = backup_destination(owner, k, node_count)
            destinations[(owner, k)] = dest
            already_sent = np.zeros(len(owned), dtype=bool)
            already_sent[pattern.send_set(owner, dest) - start] = True
            # distinct holders below rho, not the per-round m - g <= rho - k rule
            chosen = ~already_sent & (coverage < redundancy)
            coverage[chosen] += 1
            if chosen.any():
                extra_sets[(owner, k)] = _frozen_indices(owned[chosen])

    plan = RedundancyPlan(redundancy, node_count, destinations, extra_sets, pattern)
    logging.info("Redundancy plan: rho=%d, N=%d, %d extra elements per iteration",
                 redundancy, node_count, plan.total_extra())
    return plan


@dataclass
class PlanVerification:
    """Outcome of the brute-force coverage check."""
    passed: bool
    violations: List[Tuple[int, int, int]] = field(default_factory=list)
    """(owner, element, distinct receiving nodes) for each under-covered element."""
    destination_errors: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"passed": self.passed,
                "violations": [list(v) for v in self.violations],
                "destination_errors": list(self.destination_errors)}


def verify_plan(plan: RedundancyPlan, pattern: CommPattern) -> PlanVerification:
    """
    Count, element by element, the distinct nodes holding a copy besides the owner.

    Every element must reach at least ρ other nodes through S_ik or R_ik^c.
    """
    report = PlanVerification(passed=True)
    node_count = pattern.node_count
    for owner in range(node_count):
        dests = [plan.destinations.get((owner, k)) for k in range(1, plan.redundancy + 1)]
        if None in dests:
            report.destination_errors.append(f"node {owner}: missing destination")
            continue
        if owner in dests or len(set(dests)) != len(dests):
            report.destination_errors.append(f"node {owner}: destinations {dests} not distinct from owner/each other")

    for owner in range(node_count):
        start, end = pattern.partition.ranges[owner]
        receives = np.zeros((node_count, end - start), dtype=bool)
        for receiver in range(node_count):
            if receiver != owner:
                receives[receiver, pattern.send_set(owner, receiver) - start] = True
        for k in range(1, plan.redundancy + 1):
            dest = plan.destinations.get((owner, k))
            if dest is not None and dest != owner:
                receives[dest, plan.extra_set(owner, k) - start] = True
        copies = receives.sum(axis=0)
        for offset in np.nonzero(copies < plan.redundancy)[0]:
            report.violations.append((owner, start + int(offset), int(copies[offset])))

    report.passed = not report.violations and not report.destination_errors
    if not report.passed:
        logging.warning("Plan verification failed: %d under-covered elements, %d destination errors",
                        len(report.violations), len(report.destination_errors))
    return report


class CommModel:
    """
    Latency-bandwidth cost model: a message of s elements from i to j costs λ_ij + s·β̂.

    Args:
        latency: Default per-message latency λ.
        bandwidth_cost: Per-element cost β̂.
        pair_latency: Optional overrides keyed by (sender, receiver).
    """

    def __init__(self, latency: float = parameters.DEFAULT_LATENCY,
                 bandwidth_cost: float = parameters.DEFAULT_BANDWIDTH_COST,
                 pair_latency: Optional[Mapping[Pair, float]] = None):
        self.latency = float(latency)
        self.bandwidth_cost = float(bandwidth_cost)
        self.pair_latency = dict(pair_latency or {})
        if self.latency < 0.0 or any(v < 0.0 for v in self.pair_latency.values()):
            raise ValueError("Latencies must be non-negative")
        if self.bandwidth_cost <= 0.0:
            raise ValueError(f"Per-element cost must be positive, got {bandwidth_cost}")

    def latency_between(self, sender: int, receiver: int) -> float:
        return self.pair_latency.get((sender, receiver), self.latency)

    def message_time(self, sender: int, receiver: int, size: int) -> float:
        return self.latency_between(sender, receiver) + size * self.bandwidth_cost

    def max_latency(self) -> float:
        return max([self.latency, *self.pair_latency.values()])

    def allreduce_time(self, node_count: int, width: int = 1) -> float:
        """Tree allreduce: ceil(log2 N) rounds of one message each."""
        rounds = math.ceil(math.log2(node_count)) if node_count > 1 else 0
        return rounds * (self.max_latency() + width * self.bandwidth_cost)


@dataclass
class OverheadEstimate:
    """Per-iteration cost of the redundancy traffic under the latency-bandwidth model."""
    lower_elements: int
    """Σ_k max_i |R_ik^c|: extra elements on the critical path."""
    upper_elements: int
    """Σ_i Σ_k |R_ik^c|: all extra elements sent."""
    lower_time: float
    upper_time: float
    cap_time: float
    """ρ(λ_max + ceil(n/N)·β̂)."""
    per_round_max_extra: List[int]

    def to_dict(self) -> Dict:
        return {"lower_elements": self.lower_elements, "upper_elements": self.upper_elements,
                "lower_time": self.lower_time, "upper_time": self.upper_time,
                "cap_time": self.cap_time, "per_round_max_extra": list(self.per_round_max_extra)}


def estimate_overhead(plan: RedundancyPlan, pattern: CommPattern,
                      latency: Union[float, Mapping[Pair, float]] = parameters.DEFAULT_LATENCY,
                      bandwidth_cost: float = parameters.DEFAULT_BANDWIDTH_COST) -> OverheadEstimate:
    """
    Bound the extra communication time per iteration.

    A round pays a latency only on an extra edge, i.e. a pair (i, d_ik) whose
    SpMV send set is empty but whose extra set is not.

    Args:
        plan: Redundancy plan.
        pattern: SpMV send sets the plan was built on.
        latency: Uniform latency, or a map (sender, receiver) -> latency.
        bandwidth_cost: Per-element cost β̂.

    Raises:
        ValueError: negative latency or non-positive per-element cost.
    """
    if isinstance(latency, Mapping):
        model = CommModel(max(latency.values(), default=0.0), bandwidth_cost, latency)
    else:
        model = CommModel(latency, bandwidth_cost)

    per_round: List[int] = []
    lower_time = 0.0
    upper_time = 0.0
    total = 0
    for k in range(1, plan.redundancy + 1):
        sizes = [len(plan.extra_set(i, k)) for i in range(plan.node_count)]
        per_round.append(max(sizes, default=0))
        total += sum(sizes)
        edge_latencies = [model.latency_between(i, plan.destination(i, k))
                          for i in range(plan.node_count)
                          if sizes[i] and not len(pattern.send_set(i, plan.destination(i, k)))]
        lower_time += per_round[-1] * model.bandwidth_cost
        upper_time += max(edge_latencies, default=0.0) + per_round[-1] * model.bandwidth_cost

    block = math.ceil(pattern.partition.n / pattern.node_count)
    cap = plan.redundancy * (model.max_latency() + block * model.bandwidth_cost)
    return OverheadEstimate(sum(per_round), total, lower_time, upper_time, cap, per_round)


def zero_latency_condition(matrix: SparseMatrix, partition: BlockRowPartition,
                           redundancy: int) -> Dict[Pair, bool]:
    """
    For each owner i and round k, whether A_{I_{d_ik}, I_i} stores a non-zero.

    True means backups to d_ik ride along with SpMV traffic and add no latency.
    """
    pattern = compute_send_sets(matrix, partition)
    result: Dict[Pair, bool] = {}
    for owner in range(partition.node_count):
        for k in range(1, redundancy + 1):
            dest = backup_destination(owner, k, partition.node_count)
            result[(owner, k)] = bool(len(pattern.send_set(owner, dest)))
    return result
