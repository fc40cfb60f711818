"""
In-process virtual cluster: ranks grouped into nodes on a periodic 3D torus,
an intra-node copy channel and inter-node injection channels with a linear
latency + bandwidth cost model.

Nothing here moves data; it counts messages, copies, bytes and registered
memory regions and turns them into virtual time.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import RankTopology


logger = logging.getLogger(__name__)


class Phase(str, Enum):
    FORWARD = "forward-ghost"
    REVERSE = "reverse-force"
    MIGRATION = "migration"


class RegistrationPolicy(str, Enum):
    POOLED = "pooled"
    PER_NEIGHBOR = "per-neighbor"


@dataclass
class CostModel:
    """Linear cost model; latencies in microseconds, per-byte costs in us/B."""

    alpha_net: float = 0.49
    beta_net: float = 1.0 / 6800.0
    alpha_noc: float = 0.2
    beta_noc: float = 1.0e-5
    tni_per_node: int = 6
    comm_threads_per_leader: int = 6

    def __post_init__(self):
        for name in ("alpha_net", "beta_net", "alpha_noc", "beta_noc"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be a finite non-negative number, got {value}")
        if self.tni_per_node < 1:
            raise InvalidInputError(f"tni_per_node must be >= 1, got {self.tni_per_node}")
        if self.comm_threads_per_leader < 1:
            raise InvalidInputError(
                f"comm_threads_per_leader must be >= 1, got {self.comm_threads_per_leader}"
            )

    def message_cost(self, nbytes: int) -> float:
        return self.alpha_net + self.beta_net * nbytes

    def copy_cost(self, nbytes: int) -> float:
        return self.alpha_noc + self.beta_noc * nbytes

    def channels(self, senders_per_node: int) -> int:
        """Injection channels usable when ``senders_per_node`` ranks drive the network."""
        return max(1, min(self.tni_per_node, senders_per_node * self.comm_threads_per_leader))


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    nbytes: int
    phase: Phase = Phase.FORWARD
    channel: Optional[int] = None

    def __post_init__(self):
        if self.src == self.dst:
            raise InvalidInputError(f"Message from rank {self.src} to itself")
        if self.nbytes < 0:
            raise InvalidInputError(f"Negative message size: {self.nbytes}")


@dataclass(frozen=True)
class CopyRecord:
    """Intra-node copy between two ranks of the same node."""

    src: int
    dst: int
    nbytes: int
    phase: Phase = Phase.FORWARD

    def __post_init__(self):
        if self.nbytes < 0:
            raise InvalidInputError(f"Negative copy size: {self.nbytes}")


@dataclass
class SimMetrics:
    """Counters and virtual time; ``merge`` adds another delta in place."""

    nranks: int
    messages: int = 0
    copies: int = 0
    message_bytes: int = 0
    copy_bytes: int = 0
    registered_regions: int = 0
    virtual_time_us: float = 0.0
    rank_time_us: np.ndarray = field(default=None)
    rank_messages: np.ndarray = field(default=None)
    rank_atoms: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rank_time_us is None:
            self.rank_time_us = np.zeros(self.nranks)
        if self.rank_messages is None:
            self.rank_messages = np.zeros(self.nranks, dtype=int)
        if self.rank_atoms is None:
            self.rank_atoms = np.zeros(self.nranks, dtype=int)

    @property
    def total_bytes(self) -> int:
        return self.message_bytes + self.copy_bytes

    def merge(self, other: "SimMetrics") -> "SimMetrics":
        self.messages += other.messages
        self.copies += other.copies
        self.message_bytes += other.message_bytes
        self.copy_bytes += other.copy_bytes
        self.registered_regions += other.registered_regions
        self.virtual_time_us += other.virtual_time_us
        self.rank_time_us += other.rank_time_us
        self.rank_messages += other.rank_messages
        self.rank_atoms += other.rank_atoms
        return self

    def to_dict(self) -> Dict[str, float]:
        return {
            "messages": self.messages,
            "copies": self.copies,
            "message_bytes": self.message_bytes,
            "copy_bytes": self.copy_bytes,
            "total_bytes": self.total_bytes,
            "registered_regions": self.registered_regions,
            "virtual_time_us": self.virtual_time_us,
            "max_rank_time_us": float(self.rank_time_us.max()) if self.nranks else 0.0,
        }


class Cluster:
    """Virtual machine: topology, cost model and cumulative counters."""

    def __init__(self, topo: RankTopology, cost: CostModel):
        self.topo = topo
        self.cost = cost
        self.metrics = SimMetrics(nranks=topo.nranks)
        self.regions = np.zeros(topo.nranks, dtype=int)

    @property
    def nranks(self) -> int:
        return self.topo.nranks

    @property
    def nnodes(self) -> int:
        return self.topo.nnodes

    def node_of(self, rank: int) -> int:
        return self.topo.node_of(rank)

    def same_node(self, a: int, b: int) -> bool:
        return self.topo.node_of(a) == self.topo.node_of(b)

    def reset(self) -> None:
        self.metrics = SimMetrics(nranks=self.nranks)


def build_cluster(topo: RankTopology, cost: Optional[CostModel] = None) -> Cluster:
    cluster = Cluster(topo, cost or CostModel())
    logger.info(
        f"Virtual cluster: node grid {topo.node_grid}, {topo.nnodes} nodes, "
        f"{topo.nranks} ranks ({topo.ranks_per_node} per node)"
    )
    return cluster


def assign_channels(messages: Sequence[Message], channels: int, topo: RankTopology) -> List[Message]:
    """Round-robin each node's messages, in schedule order, onto its channels."""
    next_channel: Dict[int, int] = defaultdict(int)
    assigned = []
    for msg in messages:
        node = topo.node_of(msg.src)
        ch = next_channel[node] % channels
        next_channel[node] += 1
        assigned.append(Message(msg.src, msg.dst, msg.nbytes, msg.phase, ch))
    return assigned


def simulate_phase(
    cluster: Cluster,
    messages: Iterable[Message],
    copies: Iterable[CopyRecord] = (),
    channels: Optional[int] = None,
) -> SimMetrics:
    """Account one communication phase and return its metrics delta.

    Per node, copies serialize per (src, dst) pair with pairs in parallel, and
    messages serialize per injection channel; node time is copy time plus send
    time and the phase takes as long as the slowest node.
    """
    topo, cost = cluster.topo, cluster.cost
    channels = cost.tni_per_node if channels is None else max(1, int(channels))
    messages = list(messages)
    copies = list(copies)
    delta = SimMetrics(nranks=topo.nranks)

    for rec in list(messages) + list(copies):
        if not (0 <= rec.src < topo.nranks and 0 <= rec.dst < topo.nranks):
            raise InvalidInputError(f"Endpoint out of range: {rec.src} -> {rec.dst}")

    pair_time: Dict[tuple, float] = defaultdict(float)
    for cp in copies:
        if not cluster.same_node(cp.src, cp.dst):
            raise InvalidInputError(f"Copy {cp.src} -> {cp.dst} crosses nodes")
        t = cost.copy_cost(cp.nbytes)
        pair_time[(cp.src, cp.dst)] += t
        delta.copies += 1
        delta.copy_bytes += cp.nbytes
        delta.rank_time_us[cp.src] += t

    node_copy = np.zeros(topo.nnodes)
    for (src, _), t in pair_time.items():
        node = topo.node_of(src)
        node_copy[node] = max(node_copy[node], t)

    channel_time = np.zeros((topo.nnodes, channels))
    for msg in assign_channels(messages, channels, topo):
        t = cost.message_cost(msg.nbytes)
        channel_time[topo.node_of(msg.src), msg.channel] += t
        delta.messages += 1
        delta.message_bytes += msg.nbytes
        delta.rank_time_us[msg.src] += t
        delta.rank_messages[msg.src] += 1

    node_time = node_copy + channel_time.max(axis=1)
    delta.virtual_time_us = float(node_time.max()) if topo.nnodes else 0.0

    cluster.metrics.merge(delta)
    logger.debug(
        f"Phase: {delta.messages} messages, {delta.copies} copies, "
        f"{delta.total_bytes} B, {delta.virtual_time_us:.3f} us"
    )
    return delta


def register_regions(
    cluster: Cluster,
    policy: RegistrationPolicy,
    neighbor_counts: Sequence[int],
) -> np.ndarray:
    """Registered memory regions per rank: one pooled block, or a send and a receive buffer per neighbor."""
    policy = RegistrationPolicy(policy)
    counts = np.asarray(neighbor_counts, dtype=int)
    if counts.shape != (cluster.nranks,):
        raise InvalidInputError(f"Need one neighbor count per rank ({cluster.nranks}), got {counts.shape}")
    if policy is RegistrationPolicy.POOLED:
        regions = np.ones(cluster.nranks, dtype=int)
    else:
        regions = 2 * counts
    cluster.regions = regions
    cluster.metrics.registered_regions = int(regions.sum())
    return regions
