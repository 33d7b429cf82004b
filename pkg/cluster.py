#!/usr/bin/env python3

"""Round-synchronous simulation of distributed-memory nodes with fail-stop failures."""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, TextIO, Tuple, Union
import json
import logging

import numpy as np

import parameters
from matrices import (BlockRowPartition, CholeskyFactor, DimensionError, SparseMatrix,
                      extract_submatrix, spmv)
from planner import CommModel, RedundancyPlan

CURRENT = 0
"""Backup age of the search direction from the latest exchange, p^(j)."""
PREVIOUS = 1
"""Backup age of the search direction one exchange earlier, p^(j-1)."""

DYNAMIC_VECTORS: Tuple[str, ...] = ("x", "r", "z", "p", "u", "p_prev")


class ClusterConfigError(ValueError):
    """Inconsistent cluster construction inputs."""


class NodeFailedError(RuntimeError):
    """Operation addressed a node that is failed or already failed."""


@dataclass(frozen=True, eq=False)
class StaticData:
    """Inputs of one node that survive in reliable storage: rows of A, b segment, preconditioner."""
    rows: SparseMatrix
    rhs: np.ndarray
    diagonal_block: SparseMatrix
    factor: Optional[CholeskyFactor]


@dataclass
class BackupSegment:
    """Copies of an owner's search-direction elements held by another node."""
    indices: np.ndarray
    values: np.ndarray

    def lookup(self, wanted: np.ndarray) -> np.ndarray:
        positions = np.searchsorted(self.indices, wanted)
        return self.values[positions]


class NodeState:
    """
    One virtual node: its static rows and the dynamic PCG state that a failure destroys.

    Args:
        node_id: Rank of the node.
        row_range: Owned half-open row range.
        static: Static data loaded from reliable storage.
    """

    def __init__(self, node_id: int, row_range: Tuple[int, int], static: StaticData):
        self.node_id = node_id
        self.row_range = row_range
        self.static: Optional[StaticData] = static
        self.x: Optional[np.ndarray] = None
        self.r: Optional[np.ndarray] = None
        self.z: Optional[np.ndarray] = None
        self.p: Optional[np.ndarray] = None
        self.u: Optional[np.ndarray] = None
        self.p_prev: Optional[np.ndarray] = None
        self.scalars: Dict[str, float] = {}
        self.backups: Dict[Tuple[int, int], BackupSegment] = {}
        self.alive = True
        self.recovering = False
        self.notified: Set[int] = set()

    @property
    def size(self) -> int:
        return self.row_range[1] - self.row_range[0]

    def erase(self) -> None:
        """Fail-stop: drop every datum held in node memory."""
        for name in DYNAMIC_VECTORS:
            setattr(self, name, None)
        self.static = None
        self.scalars = {}
        self.backups = {}
        self.notified = set()
        self.alive = False

    def age_backups(self) -> None:
        """Demote current copies to previous and discard the older generation."""
        aged = {}
        for (owner, age), segment in self.backups.items():
            if age == CURRENT:
                aged[(owner, PREVIOUS)] = segment
        self.backups = aged

    def local(self, name: str, global_indices: np.ndarray) -> np.ndarray:
        """Values of an owned dynamic vector at global indices."""
        vector = getattr(self, name)
        if vector is None:
            raise NodeFailedError(f"Node {self.node_id} holds no {name!r}")
        return vector[np.asarray(global_indices) - self.row_range[0]]


class ScheduleError(ValueError):
    """Failure schedule that the redundancy degree cannot absorb."""


@dataclass(frozen=True)
class FailureEvent:
    """
    Nodes failing together.

    An event either fires at an iteration boundary, or during the reconstruction
    triggered by the closest preceding iteration event, just before `stage`.
    """
    nodes: Tuple[int, ...]
    iteration: Optional[int] = None
    during_recovery: bool = False
    stage: str = parameters.DEFAULT_OVERLAP_STAGE

    def to_dict(self) -> Dict:
        return {"nodes": list(self.nodes), "iteration": self.iteration,
                "during_recovery": self.during_recovery, "stage": self.stage}


@dataclass
class FailureGroup:
    """An iteration event with the overlapping events that interrupt its recovery."""
    trigger: FailureEvent
    overlaps: List[FailureEvent]

    def failed_nodes(self) -> Set[int]:
        nodes = set(self.trigger.nodes)
        for event in self.overlaps:
            nodes.update(event.nodes)
        return nodes


@dataclass
class FailureSchedule:
    events: List[FailureEvent] = field(default_factory=list)

    def groups(self) -> List[FailureGroup]:
        """
        Pair each iteration event with the during-recovery events that follow it.

        Raises:
            ScheduleError: A during-recovery event precedes every iteration event.
        """
        groups: List[FailureGroup] = []
        for event in self.events:
            if event.during_recovery:
                if not groups:
                    raise ScheduleError("Overlapping failure with no recovery to interrupt")
                groups[-1].overlaps.append(event)
            else:
                groups.append(FailureGroup(event, []))
        return groups

    def validate(self, node_count: int, redundancy: int) -> None:
        """
        Check node ids, trigger points and the cumulative failure count per recovery.

        Raises:
            ScheduleError: Any check fails.
        """
        for event in self.events:
            if not event.nodes:
                raise ScheduleError("Failure event names no nodes")
            bad = [n for n in event.nodes if not 0 <= n < node_count]
            if bad:
                raise ScheduleError(f"Nodes {bad} outside [0, {node_count})")
            if event.during_recovery:
                if event.stage not in parameters.RECOVERY_STAGES:
                    raise ScheduleError(f"Unknown recovery stage {event.stage!r}")
            elif event.iteration is None or event.iteration < 0:
                raise ScheduleError(f"Iteration event needs a non-negative iteration, got {event.iteration}")
        for group in self.groups():
            failed = group.failed_nodes()
            if len(failed) > redundancy:
                raise ScheduleError(f"Recovery at iteration {group.trigger.iteration} would face "
                                    f"{len(failed)} failed nodes {sorted(failed)} with redundancy {redundancy}")

    def to_dict(self) -> List[Dict]:
        return [event.to_dict() for event in self.events]


@dataclass
class CommStats:
    """Message and model-time counters; the recovery_* fields cover reconstruction traffic."""
    messages: int = 0
    elements_sent: int = 0
    extra_elements: int = 0
    extra_edges: int = 0
    model_time: float = 0.0
    extra_model_time: float = 0.0
    allreduce_count: int = 0
    dropped_messages: int = 0
    recovery_messages: int = 0
    recovery_elements: int = 0
    recovery_model_time: float = 0.0

    def snapshot(self) -> "CommStats":
        return replace(self)

    def to_dict(self) -> Dict[str, Union[int, float]]:
        return asdict(self)


class EventTrace:
    """
    Ordered log of exchanges, allreduces, failures and recoveries.

    Records are kept in memory and, when a stream is given, written as JSON lines.
    """

    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream
        self.records: List[Dict] = []
        self.run_label = ""

    def record(self, kind: str, **fields) -> Dict:
        entry = {"seq": len(self.records), "run": self.run_label, "kind": kind, **fields}
        self.records.append(entry)
        if self.stream is not None:
            self.stream.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def of_kind(self, kind: str) -> List[Dict]:
        return [r for r in self.records if r["kind"] == kind]


class ClusterState:
    """
    N virtual nodes sharing a static redundancy plan and a cost model.

    Per-node work runs sequentially in ascending node id.
    """

    def __init__(self, matrix: SparseMatrix, rhs: np.ndarray, partition: BlockRowPartition,
                 plan: RedundancyPlan, storage: List[StaticData], preconditioner: str,
                 model: CommModel, trace: Optional[EventTrace] = None):
        self.matrix = matrix
        self.rhs = rhs
        self.partition = partition
        self.plan = plan
        self.pattern = plan.pattern
        self.storage = storage
        self.preconditioner = preconditioner
        self.model = model
        self.trace = trace if trace is not None else EventTrace()
        self.stats = CommStats()
        self.iteration = 0
        self.failed: Set[int] = set()
        self.nodes: List[NodeState] = [NodeState(i, partition.ranges[i], storage[i])
                                       for i in range(partition.node_count)]
        for node in self.nodes:
            node.x = np.zeros(node.size)

    @property
    def node_count(self) -> int:
        return self.partition.node_count

    @property
    def redundancy(self) -> int:
        return self.plan.redundancy

    def live_nodes(self) -> List[NodeState]:
        return [node for node in self.nodes if node.alive]

    def survivors(self) -> List[NodeState]:
        """Live nodes that carry valid dynamic state (not replacements mid-recovery)."""
        return [node for node in self.nodes if node.alive and not node.recovering]

    def scalar(self, name: str) -> float:
        for node in self.survivors():
            if name in node.scalars:
                return node.scalars[name]
        raise KeyError(f"No surviving node holds scalar {name!r}")

    def payload(self, owner: int, receiver: int) -> Tuple[np.ndarray, np.ndarray]:
        """SpMV send set and redundancy extra set travelling from owner to receiver."""
        needed = self.pattern.send_set(owner, receiver)
        round_index = self.plan.round_for(owner, receiver)
        extra = self.plan.extra_set(owner, round_index) if round_index else needed[:0]
        return needed, extra

    def exchange_spmv(self, vector: str = "p") -> Dict[int, np.ndarray]:
        """
        Send search-direction elements, refresh backups and compute u = A p on every live node.

        Each (owner, receiver) pair exchanges one message carrying S_ik and,
        when receiver is the owner's round-k backup destination, R_ik^c.
        Messages to failed nodes are dropped and the sender is notified.

        Returns:
            u segment per live node id.
        """
        for node in self.live_nodes():
            node.age_backups()

        n = self.partition.n
        ghosts = {node.node_id: np.zeros(n) for node in self.live_nodes()}
        for node in self.live_nodes():
            start, end = node.row_range
            ghosts[node.node_id][start:end] = getattr(node, vector)

        messages = elements = extra_elements = extra_edges = dropped = 0
        base_time = 0.0
        round_time = [0.0] * (self.redundancy + 1)
        for owner in self.live_nodes():
            targets = set(self.pattern.receivers(owner.node_id))
            targets.update(self.plan.backup_receivers(owner.node_id))
            for receiver_id in sorted(targets):
                needed, extra = self.payload(owner.node_id, receiver_id)
                if not len(needed) and not len(extra):
                    continue
                receiver = self.nodes[receiver_id]
                if not receiver.alive:
                    dropped += 1
                    owner.notified.add(receiver_id)
                    logging.warning("Message %d -> %d dropped: receiver failed",
                                    owner.node_id, receiver_id)
                    continue
                sent = np.union1d(needed, extra)
                values = owner.local(vector, sent)
                ghosts[receiver_id][sent] = values
                receiver.backups[(owner.node_id, CURRENT)] = BackupSegment(sent, values.copy())

                messages += 1
                elements += len(sent)
                extra_elements += len(extra)
                extra_edge = not len(needed) and len(extra) > 0
                extra_edges += int(extra_edge)
                if len(needed):
                    base_time = max(base_time, self.model.message_time(owner.node_id, receiver_id,
                                                                       len(needed)))
                round_index = self.plan.round_for(owner.node_id, receiver_id)
                if round_index and len(extra):
                    latency = self.model.latency_between(owner.node_id, receiver_id) if extra_edge else 0.0
                    round_time[round_index] = max(round_time[round_index],
                                                  latency + len(extra) * self.model.bandwidth_cost)
                if parameters.DYNAMIC_MODE:
                    logging.debug("Send %d -> %d: %d needed + %d extra elements",
                                  owner.node_id, receiver_id, len(needed), len(extra))

        products = {}
        for node in self.live_nodes():
            node.u = spmv(node.static.rows, ghosts[node.node_id])
            products[node.node_id] = node.u

        extra_time = sum(round_time)
        self.stats.messages += messages
        self.stats.elements_sent += elements
        self.stats.extra_elements += extra_elements
        self.stats.extra_edges += extra_edges
        self.stats.dropped_messages += dropped
        self.stats.model_time += base_time + extra_time
        self.stats.extra_model_time += extra_time
        self.trace.record("exchange", iteration=self.iteration, messages=messages,
                          elements=elements, extra_elements=extra_elements,
                          extra_edges=extra_edges, model_time=base_time + extra_time,
                          extra_model_time=extra_time, dropped=dropped)
        return products

    def allreduce_sum(self, contributions: Mapping[int, Union[float, np.ndarray]],
                      names: Optional[Sequence[str]] = None) -> Union[float, np.ndarray]:
        """
        Sum one contribution per live node in ascending node-id order.

        Args:
            contributions: Map node id -> scalar or small array.
            names: If given, the components of the result are stored under these
                scalar names on every live node.

        Raises:
            ValueError: A live node did not contribute, or a failed node did.
        """
        live_ids = [node.node_id for node in self.live_nodes()]
        missing = [i for i in live_ids if i not in contributions]
        if missing:
            raise ValueError(f"Allreduce contribution missing from live nodes {missing}")
        stray = [i for i in contributions if i not in live_ids]
        if stray:
            raise ValueError(f"Allreduce contribution from failed nodes {stray}")

        total = None
        for node_id in live_ids:
            value = contributions[node_id]
            total = value if total is None else total + value
        if np.ndim(total) == 0:
            total = float(total)

        width = int(np.size(total))
        if names is not None:
            components = [total] if width == 1 and np.ndim(total) == 0 else list(total)
            if len(components) != len(names):
                raise ValueError(f"{len(names)} names for {len(components)} reduced values")
            for node_id in live_ids:
                for name, value in zip(names, components):
                    self.nodes[node_id].scalars[name] = float(value)

        self.stats.allreduce_count += 1
        self.stats.model_time += self.model.allreduce_time(self.node_count, width)
        self.trace.record("allreduce", iteration=self.iteration, width=width)
        return total

    def inject_failures(self, node_ids: Iterable[int]) -> None:
        """
        Fail-stop the given nodes and notify the survivors.

        Raises:
            NodeFailedError: A node is out of range or already failed.
        """
        node_ids = sorted(set(node_ids))
        for node_id in node_ids:
            if not 0 <= node_id < self.node_count:
                raise NodeFailedError(f"Node {node_id} does not exist")
            if not self.nodes[node_id].alive:
                raise NodeFailedError(f"Node {node_id} has already failed")
        for node_id in node_ids:
            self.nodes[node_id].erase()
            self.failed.add(node_id)
        for node in self.live_nodes():
            node.notified.update(node_ids)
        self.trace.record("failure", iteration=self.iteration, nodes=node_ids)
        logging.warning("Iteration %d: nodes %s failed", self.iteration, node_ids)

    def provision_replacements(self, node_ids: Iterable[int]) -> List[NodeState]:
        """
        Start fresh nodes with the ids, row ranges and static data of failed ones.

        Raises:
            NodeFailedError: A named node has not failed.
        """
        replacements = []
        for node_id in sorted(set(node_ids)):
            if node_id not in self.failed or self.nodes[node_id].alive:
                raise NodeFailedError(f"Node {node_id} is not awaiting a replacement")
            node = NodeState(node_id, self.partition.ranges[node_id], self.storage[node_id])
            node.recovering = True
            self.nodes[node_id] = node
            replacements.append(node)
        if replacements:
            logging.info("Provisioned replacements for nodes %s", [n.node_id for n in replacements])
        return replacements

    def complete_recovery(self, node_ids: Iterable[int]) -> None:
        node_ids = set(node_ids)
        for node_id in node_ids:
            self.nodes[node_id].recovering = False
        self.failed -= node_ids
        for node in self.live_nodes():
            node.notified -= node_ids

    def locate_copies(self, owner: int, age: int, indices: np.ndarray) -> np.ndarray:
        """
        Lowest-id surviving holder of each element's backup, or -1 where none survives.

        Replacement nodes hold nothing and are never chosen.
        """
        holders = np.full(len(indices), -1, dtype=np.int64)
        for node in self.survivors():
            if node.node_id == owner:
                continue
            segment = node.backups.get((owner, age))
            if segment is None:
                continue
            found = np.isin(indices, segment.indices) & (holders < 0)
            holders[found] = node.node_id
        return holders

    def fetch_copies(self, owner: int, age: int, indices: np.ndarray,
                     holders: np.ndarray) -> np.ndarray:
        values = np.empty(len(indices))
        for holder in np.unique(holders):
            mask = holders == holder
            values[mask] = self.nodes[holder].backups[(owner, age)].lookup(indices[mask])
        return values

    def charge_recovery(self, transfers: Sequence[Tuple[int, int, int]]) -> float:
        """
        Account one communication round of recovery messages (sender, receiver, size).

        Returns:
            Model time of the round.
        """
        transfers = [t for t in transfers if t[2] > 0 and t[0] != t[1]]
        if not transfers:
            return 0.0
        cost = max(self.model.message_time(s, r, size) for s, r, size in transfers)
        self.stats.recovery_messages += len(transfers)
        self.stats.recovery_elements += sum(size for _, _, size in transfers)
        self.stats.recovery_model_time += cost
        return cost

    def copy_counts(self, age: int = CURRENT) -> np.ndarray:
        """Number of distinct live nodes holding each search-direction element of the given age."""
        counts = np.zeros(self.partition.n, dtype=np.int64)
        own = "p" if age == CURRENT else "p_prev"
        for node in self.live_nodes():
            if getattr(node, own) is not None:
                counts[node.row_range[0]:node.row_range[1]] += 1
            for (owner, segment_age), segment in node.backups.items():
                if segment_age == age and owner != node.node_id:
                    counts[segment.indices] += 1
        return counts

    def check_backups(self) -> List[str]:
        """Compare every backup copy with its owner's retained search direction."""
        mismatches = []
        for node in self.live_nodes():
            for (owner_id, age), segment in sorted(node.backups.items()):
                owner = self.nodes[owner_id]
                name = "p" if age == CURRENT else "p_prev"
                if not owner.alive or getattr(owner, name) is None:
                    continue
                if not np.array_equal(owner.local(name, segment.indices), segment.values):
                    mismatches.append(f"node {node.node_id} copy of {owner_id} age {age}")
        return mismatches

    def global_vector(self, name: str) -> np.ndarray:
        """Concatenate a dynamic vector over all nodes."""
        parts = []
        for node in self.nodes:
            vector = getattr(node, name) if node.alive else None
            if vector is None:
                raise NodeFailedError(f"Node {node.node_id} holds no {name!r}")
            parts.append(vector)
        return np.concatenate(parts) if parts else np.zeros(0)

    def snapshot_state(self) -> Dict[str, np.ndarray]:
        """Copies of the global x, r, z, p and p_prev; used as ground truth before failures."""
        return {name: self.global_vector(name).copy() for name in ("x", "r", "z", "p", "p_prev")}


def build_cluster(matrix: SparseMatrix, rhs: np.ndarray, partition: BlockRowPartition,
                  plan: RedundancyPlan, preconditioner: str = "block-jacobi",
                  model: Optional[CommModel] = None,
                  trace: Optional[EventTrace] = None) -> ClusterState:
    """
    Distribute A and b over block rows and factor the local preconditioner blocks.

    Args:
        matrix: SPD system matrix.
        rhs: Right-hand side b.
        partition: Block-row partition, one block per node.
        plan: Redundancy plan built on the same partition.
        preconditioner: "block-jacobi" (exact Cholesky of A_{I_i,I_i}) or "identity".
        model: Latency-bandwidth model; defaults from parameters.
        trace: Event trace to append to.

    Raises:
        DimensionError: A, b and the partition disagree.
        ClusterConfigError: Plan inconsistent with the partition or ρ >= N.
        NotSPDError: A local diagonal block has a non-positive pivot.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if matrix.n_rows != matrix.n_cols or matrix.n_rows != partition.n or rhs.shape != (partition.n,):
        raise DimensionError(f"Matrix {matrix.shape}, rhs {rhs.shape} and partition of "
                             f"{partition.n} rows disagree")
    if preconditioner not in parameters.PRECONDITIONERS:
        raise ClusterConfigError(f"Unknown preconditioner {preconditioner!r}; "
                                 f"expected one of {parameters.PRECONDITIONERS}")
    if plan.node_count != partition.node_count:
        raise ClusterConfigError(f"Plan for {plan.node_count} nodes on a {partition.node_count}-node partition")
    if plan.redundancy >= partition.node_count:
        raise ClusterConfigError(f"Redundancy {plan.redundancy} needs more than {partition.node_count} nodes")
    if plan.pattern is None or plan.pattern.partition != partition:
        raise ClusterConfigError("Plan was not built on this partition")

    storage = []
    for node_id, (start, end) in enumerate(partition.ranges):
        owned = np.arange(start, end)
        block = extract_submatrix(matrix, owned, owned)
        factor = CholeskyFactor(block) if preconditioner == "block-jacobi" else None
        storage.append(StaticData(matrix.row_block(start, end), rhs[start:end].copy(), block, factor))

    cluster = ClusterState(matrix, rhs, partition, plan, storage, preconditioner,
                           model or CommModel(), trace)
    logging.info("Cluster built: N=%d, n=%d, rho=%d, preconditioner=%s",
                 partition.node_count, partition.n, plan.redundancy, preconditioner)
    return cluster
