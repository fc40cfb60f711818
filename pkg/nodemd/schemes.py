"""
Ghost-exchange patterns over the virtual cluster.

Three patterns fill each rank's store with the ghost atoms it needs:

- three-stage: shifts along x, then y, then z, both directions per round,
  later rounds forwarding what the previous round delivered;
- p2p: every rank sends directly to all ranks within the layer range;
- node-based: leaders gather the node's atoms, exchange node-box halos with
  neighboring nodes and scatter the result inside the node. With load balance
  every rank of a node holds the whole node-box and evaluates an equal slice.

A ghost is a reference (owner rank, owner index, periodic image); its position
is always the owner's position plus ``image * L``, so every pattern produces
bitwise the same coordinates. Forces travel back as records keyed by
(center gid, slot) and owners sum them in that order.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConsistencyError, InvalidInputError, PlanError, UndefinedMetricError
from .geometry import (
    Int3,
    RankTopology,
    SimBox,
    SubBox,
    decompose,
    layers_needed,
    locate_ranks,
)
from .netsim import (
    Cluster,
    CopyRecord,
    Message,
    Phase,
    RegistrationPolicy,
    SimMetrics,
    register_regions,
    simulate_phase,
)
from .potential import ForceResult, reduce_records


logger = logging.getLogger(__name__)

MAX_LAYERS = 3
LEADER_LOCALS = {1: (2,), 2: (2, 3), 4: (0, 1, 2, 3)}

# 3 doubles + gid and type as 32-bit ints
FORWARD_BYTES = 32
# 3 doubles of force
REVERSE_BYTES = 24
# position, velocity, gid, type
MIGRATION_BYTES = 56


class Scheme(str, Enum):
    THREE_STAGE = "three-stage"
    P2P = "p2p"
    NODE_BASED = "node-based"


# --------------------------------------------------------------------------
# Plans
# --------------------------------------------------------------------------


def _offsets(layers: Sequence[int]) -> Tuple[Int3, ...]:
    ranges = [range(-l, l + 1) for l in layers]
    return tuple(o for o in itertools.product(*ranges) if any(o))


def _node_boxes(topo: RankTopology, subboxes: Sequence[SubBox]) -> Tuple[SubBox, ...]:
    boxes = []
    for node in range(topo.nnodes):
        members = [subboxes[r] for r in topo.ranks_of_node(node)]
        lo = tuple(min(s.lo[d] for s in members) for d in range(3))
        hi = tuple(max(s.hi[d] for s in members) for d in range(3))
        boxes.append(SubBox(lo=lo, hi=hi, owner=node))
    return tuple(boxes)


@dataclass(frozen=True)
class CommPlan:
    """Immutable exchange schedule for one scheme on one topology."""

    scheme: Scheme
    topo: RankTopology
    box: SimBox
    cutoff: float
    layers: Int3
    node_layers: Int3
    leaders: Tuple[int, ...]
    load_balance: bool
    rounds: Tuple[Tuple[int, int], ...]
    offsets: Tuple[Int3, ...]
    subboxes: Tuple[SubBox, ...] = field(repr=False, compare=False)
    node_boxes: Tuple[SubBox, ...] = field(repr=False, compare=False)

    @property
    def round_count(self) -> int:
        return len(self.rounds) if self.scheme is Scheme.THREE_STAGE else 1

    @property
    def peer_count(self) -> int:
        """Ranks (three-stage, p2p) or nodes (node-based) each sender talks to."""
        if self.scheme is Scheme.THREE_STAGE:
            return 2 * sum(1 for l in self.layers if l > 0)
        return len(self.offsets)

    @property
    def messages_per_rank(self) -> float:
        if self.scheme is Scheme.THREE_STAGE:
            return 2.0 * len(self.rounds)
        if self.scheme is Scheme.P2P:
            return float(len(self.offsets))
        return len(self.offsets) / self.topo.ranks_per_node

    @property
    def senders_per_node(self) -> int:
        if self.scheme is Scheme.NODE_BASED:
            return len(self.leaders)
        return self.topo.ranks_per_node

    def leader_for(self, offset_index: int) -> int:
        return self.leaders[offset_index % len(self.leaders)]

    def neighbor_counts(self) -> np.ndarray:
        """Inter-rank communication partners per rank, for buffer registration."""
        topo = self.topo
        if self.scheme is not Scheme.NODE_BASED:
            return np.full(topo.nranks, self.peer_count, dtype=int)
        per_local = np.zeros(topo.ranks_per_node, dtype=int)
        for i in range(len(self.offsets)):
            per_local[self.leader_for(i)] += 1
        return np.tile(per_local, topo.nnodes)


def plan_exchange(
    scheme,
    topo: RankTopology,
    box: SimBox,
    cutoff: float,
    leaders: int = 4,
    load_balance: bool = True,
) -> CommPlan:
    """Build the send schedule of ``scheme`` for a communication cutoff."""
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise InvalidInputError(
            f"Unknown scheme '{scheme}', expected one of {[s.value for s in Scheme]}"
        ) from None
    if not np.isfinite(cutoff) or cutoff <= 0:
        raise InvalidInputError(f"Communication cutoff must be positive, got {cutoff}")
    if leaders not in LEADER_LOCALS:
        raise PlanError(f"Leader count must be 1, 2 or 4, got {leaders}")

    sides = box.array / np.asarray(topo.rank_grid)
    layers = layers_needed(sides, cutoff)
    if layers.max() > MAX_LAYERS:
        raise PlanError(
            f"Cutoff {cutoff} needs {tuple(int(l) for l in layers)} layers; "
            f"at most {MAX_LAYERS} are supported (sub-box sides {tuple(sides)})"
        )
    node_sides = sides * np.asarray(topo.node_layout)
    node_layers = layers_needed(node_sides, cutoff)
    rpn = topo.ranks_per_node
    leader_locals = tuple(sorted({i % rpn for i in LEADER_LOCALS[leaders]}))

    if scheme is Scheme.THREE_STAGE:
        rounds = tuple((d, k) for d in range(3) for k in range(1, int(layers[d]) + 1))
        offsets: Tuple[Int3, ...] = ()
    elif scheme is Scheme.P2P:
        rounds = ()
        offsets = _offsets(layers)
    else:
        rounds = ()
        offsets = _offsets(node_layers)

    subboxes = tuple(decompose(box, topo))
    plan = CommPlan(
        scheme=scheme,
        topo=topo,
        box=box,
        cutoff=float(cutoff),
        layers=tuple(int(l) for l in layers),
        node_layers=tuple(int(l) for l in node_layers),
        leaders=leader_locals,
        load_balance=bool(load_balance) and scheme is Scheme.NODE_BASED,
        rounds=rounds,
        offsets=offsets,
        subboxes=subboxes,
        node_boxes=_node_boxes(topo, subboxes),
    )
    logger.info(
        f"Plan {scheme.value}: layers {plan.layers}, node layers {plan.node_layers}, "
        f"rounds {plan.round_count}, peers {plan.peer_count}, "
        f"messages/rank {plan.messages_per_rank:g}"
    )
    return plan


# --------------------------------------------------------------------------
# Stores
# --------------------------------------------------------------------------


@dataclass
class Refs:
    """Atom references: owner rank, index in the owner's local segment, image."""

    owner_rank: np.ndarray
    owner_index: np.ndarray
    image: np.ndarray

    @classmethod
    def empty(cls) -> "Refs":
        return cls(np.empty(0, dtype=int), np.empty(0, dtype=int), np.empty((0, 3), dtype=int))

    @classmethod
    def own(cls, rank: int, nlocal: int) -> "Refs":
        return cls(
            np.full(nlocal, rank, dtype=int), np.arange(nlocal), np.zeros((nlocal, 3), dtype=int)
        )

    @classmethod
    def concat(cls, parts: Sequence["Refs"]) -> "Refs":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.owner_rank for p in parts]),
            np.concatenate([p.owner_index for p in parts]),
            np.concatenate([p.image for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.owner_rank)

    def take(self, mask: np.ndarray) -> "Refs":
        return Refs(self.owner_rank[mask], self.owner_index[mask], self.image[mask])

    def shifted(self, shift: np.ndarray) -> "Refs":
        return Refs(self.owner_rank, self.owner_index, self.image + np.asarray(shift, dtype=int))


@dataclass
class AtomStore:
    """One rank's atoms: own locals first, then peers' locals (load balance), then ghosts.

    ``segments`` labels the contiguous ranges; ``eval_rows`` are the entries this
    rank evaluates as centers.
    """

    rank: int
    positions: np.ndarray
    velocities: np.ndarray
    types: np.ndarray
    gids: np.ndarray
    images: np.ndarray
    owner_rank: np.ndarray
    owner_index: np.ndarray
    nlocal: int
    forces: np.ndarray = None
    node_nlocal: int = 0
    segments: List[Tuple[str, int, int]] = field(default_factory=list)
    eval_rows: np.ndarray = None

    def __post_init__(self):
        if self.forces is None:
            self.forces = np.zeros((self.nlocal, 3))
        if self.eval_rows is None:
            self.eval_rows = np.arange(self.nlocal)
        if not self.segments:
            self.segments = [("local", 0, self.nlocal)]
            self.node_nlocal = self.nlocal
        if len(np.unique(self.gids[: self.nlocal])) != self.nlocal:
            raise ConsistencyError(f"Rank {self.rank}: duplicate global id among locals")

    @classmethod
    def from_locals(cls, rank: int, positions, velocities, types, gids) -> "AtomStore":
        n = len(gids)
        return cls(
            rank=rank,
            positions=np.asarray(positions, dtype=np.float64).reshape(n, 3).copy(),
            velocities=np.asarray(velocities, dtype=np.float64).reshape(n, 3).copy(),
            types=np.asarray(types, dtype=int).copy(),
            gids=np.asarray(gids, dtype=np.int64).copy(),
            images=np.zeros((n, 3), dtype=int),
            owner_rank=np.full(n, rank, dtype=int),
            owner_index=np.arange(n),
            nlocal=n,
        )

    @property
    def size(self) -> int:
        return len(self.gids)

    @property
    def nghost(self) -> int:
        return self.size - self.nlocal

    @property
    def ghost_start(self) -> int:
        """First entry of the halo; peers' locals under load balance come before it."""
        return self.node_nlocal

    def segment(self, label: str) -> slice:
        for name, start, stop in self.segments:
            if name == label:
                return slice(start, stop)
        raise KeyError(label)

    def ghost_set(self) -> Set[Tuple[int, Tuple[int, int, int]]]:
        """(gid, image) of every halo entry."""
        start = self.ghost_start
        return {
            (int(g), tuple(int(v) for v in im))
            for g, im in zip(self.gids[start:], self.images[start:])
        }


class _LocalIndex:
    """Concatenated view of every rank's locals for resolving references."""

    def __init__(self, stores: Sequence[AtomStore], box: SimBox):
        counts = np.array([s.nlocal for s in stores], dtype=int)
        self.base = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(int)
        self.counts = counts
        self.lengths = box.array
        if counts.sum():
            self.positions = np.concatenate([s.positions[: s.nlocal] for s in stores])
            self.types = np.concatenate([s.types[: s.nlocal] for s in stores])
            self.gids = np.concatenate([s.gids[: s.nlocal] for s in stores])
        else:
            self.positions = np.empty((0, 3))
            self.types = np.empty(0, dtype=int)
            self.gids = np.empty(0, dtype=np.int64)

    def flat(self, refs: Refs) -> np.ndarray:
        return self.base[refs.owner_rank] + refs.owner_index

    def positions_of(self, refs: Refs) -> np.ndarray:
        if not len(refs):
            return np.empty((0, 3))
        return self.positions[self.flat(refs)] + refs.image * self.lengths


@dataclass
class Domain:
    """All rank stores of one decomposed system plus the active exchange route."""

    box: SimBox
    topo: RankTopology
    stores: List[AtomStore]
    route: Optional["Route"] = None

    @property
    def natoms(self) -> int:
        return int(sum(s.nlocal for s in self.stores))

    def gather_locals(self):
        """Global arrays sorted by gid: positions, velocities, types, gids, forces."""
        pos = np.concatenate([s.positions[: s.nlocal] for s in self.stores])
        vel = np.concatenate([s.velocities[: s.nlocal] for s in self.stores])
        types = np.concatenate([s.types[: s.nlocal] for s in self.stores])
        gids = np.concatenate([s.gids[: s.nlocal] for s in self.stores])
        forces = np.concatenate([s.forces[: s.nlocal] for s in self.stores])
        order = np.argsort(gids, kind="stable")
        return pos[order], vel[order], types[order], gids[order], forces[order]


def distribute(
    positions: np.ndarray,
    velocities: np.ndarray,
    types: np.ndarray,
    box: SimBox,
    topo: RankTopology,
    gids: Optional[np.ndarray] = None,
) -> Domain:
    """Wrap atoms into the box and hand each to the rank owning its position."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    gids = np.arange(n, dtype=np.int64) if gids is None else np.asarray(gids, dtype=np.int64)
    if len(np.unique(gids)) != n:
        raise InvalidInputError("Global ids must be unique")
    velocities = np.zeros((n, 3)) if velocities is None else np.asarray(velocities, dtype=np.float64)
    types = np.asarray(types, dtype=int)
    wrapped = box.wrap(positions)
    owners = locate_ranks(wrapped, box, topo) if n else np.empty(0, dtype=int)
    stores = []
    for rank in range(topo.nranks):
        idx = np.flatnonzero(owners == rank)
        idx = idx[np.argsort(gids[idx], kind="stable")]
        stores.append(AtomStore.from_locals(rank, wrapped[idx], velocities[idx], types[idx], gids[idx]))
    return Domain(box=box, topo=topo, stores=stores)


# --------------------------------------------------------------------------
# Routes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Transfer:
    """One scheduled transfer: ``message`` between nodes, ``copy`` inside a node,
    ``image`` a periodic self-copy that never leaves the rank."""

    kind: str
    src: int
    dst: int
    count: int


@dataclass
class Route:
    """Transfers of a forward exchange grouped into sequential stages."""

    stages: List[List[Transfer]]
    channels: int

    def account(self, cluster: Cluster, bytes_per_atom: int, phase: Phase, reverse: bool = False) -> SimMetrics:
        total = SimMetrics(nranks=cluster.nranks)
        stages = reversed(self.stages) if reverse else self.stages
        for stage in stages:
            messages, copies = [], []
            for t in stage:
                src, dst = (t.dst, t.src) if reverse else (t.src, t.dst)
                if t.kind == "message":
                    messages.append(Message(src, dst, bytes_per_atom * t.count, phase))
                elif t.kind == "copy":
                    copies.append(CopyRecord(src, dst, bytes_per_atom * t.count, phase))
            if messages or copies:
                total.merge(simulate_phase(cluster, messages, copies, self.channels))
        return total


def _kind(topo: RankTopology, src: int, dst: int) -> str:
    if src == dst:
        return "image"
    return "copy" if topo.node_of(src) == topo.node_of(dst) else "message"


def _three_stage_route(plan: CommPlan, index: _LocalIndex, stores: Sequence[AtomStore]):
    topo, grid, c = plan.topo, np.asarray(plan.topo.rank_grid), plan.cutoff
    nranks = topo.nranks
    coords = [topo.rank_coords(r) for r in range(nranks)]
    held = [Refs.own(r, stores[r].nlocal) for r in range(nranks)]
    ghosts: List[List[Refs]] = [[] for _ in range(nranks)]
    stages = []
    for d in range(3):
        start = [Refs.concat([held[r]] + ghosts[r]) for r in range(nranks)]
        prev = {+1: start, -1: start}
        received: List[List[Refs]] = [[] for _ in range(nranks)]
        for k in range(1, plan.layers[d] + 1):
            stage = []
            for direction in (+1, -1):
                nxt: List[Refs] = [Refs.empty()] * nranks
                for p in range(nranks):
                    target = coords[p].copy()
                    target[d] += direction
                    q = topo.rank_id(target)
                    shift = np.zeros(3, dtype=int)
                    shift[d] = -(target[d] // grid[d])
                    cand = prev[direction][p].shifted(shift)
                    x = index.positions_of(cand)[:, d]
                    sub = plan.subboxes[q]
                    chosen = cand.take((x > sub.lo[d] - c) & (x < sub.hi[d] + c))
                    nxt[q] = chosen
                    stage.append(Transfer(_kind(topo, p, q), p, q, len(chosen)))
                prev[direction] = nxt
                for q in range(nranks):
                    received[q].append(nxt[q])
            stages.append(stage)
        for r in range(nranks):
            ghosts[r].extend(received[r])
    layout = [[("ghost", Refs.concat(ghosts[r]))] for r in range(nranks)]
    return layout, stages


def _p2p_route(plan: CommPlan, index: _LocalIndex, stores: Sequence[AtomStore]):
    topo, grid, c = plan.topo, np.asarray(plan.topo.rank_grid), plan.cutoff
    incoming: List[List[Refs]] = [[] for _ in range(topo.nranks)]
    stage = []
    for p in range(topo.nranks):
        own = Refs.own(p, stores[p].nlocal)
        base = topo.rank_coords(p)
        for o in plan.offsets:
            target = base + np.asarray(o)
            q = topo.rank_id(target)
            cand = own.shifted(-(target // grid))
            chosen = cand.take(plan.subboxes[q].in_ghost_region(index.positions_of(cand), c))
            incoming[q].append(chosen)
            stage.append(Transfer(_kind(topo, p, q), p, q, len(chosen)))
    layout = [[("ghost", Refs.concat(incoming[r]))] for r in range(topo.nranks)]
    return layout, [stage]


def _node_based_route(plan: CommPlan, index: _LocalIndex, stores: Sequence[AtomStore]):
    topo, c = plan.topo, plan.cutoff
    rpn = topo.ranks_per_node
    node_grid = np.asarray(topo.node_grid)
    leaders = plan.leaders

    gather, send, scatter = [], [], []
    node_locals = []
    for node in range(topo.nnodes):
        ranks = topo.ranks_of_node(node)
        node_locals.append(Refs.concat([Refs.own(r, stores[r].nlocal) for r in ranks]))
        for lead in leaders:
            dst = ranks[lead]
            for r in ranks:
                if r != dst:
                    gather.append(Transfer("copy", r, dst, stores[r].nlocal))

    # chunks received per node: (source node, offset index, holding rank, refs)
    received: List[List[Tuple[int, int, int, Refs]]] = [[] for _ in range(topo.nnodes)]
    for node in range(topo.nnodes):
        base = topo.node_coords(node)
        for i, o in enumerate(plan.offsets):
            lead = plan.leader_for(i)
            target = base + np.asarray(o)
            dest = topo.node_id(target)
            cand = node_locals[node].shifted(-(target // node_grid))
            chosen = cand.take(plan.node_boxes[dest].in_ghost_region(index.positions_of(cand), c))
            src = node * rpn + lead
            dst = dest * rpn + lead
            send.append(Transfer(_kind(topo, src, dst), src, dst, len(chosen)))
            received[dest].append((node, i, dst, chosen))

    layout: List[List[Tuple[str, Refs]]] = [[] for _ in range(topo.nranks)]
    for node in range(topo.nnodes):
        ranks = topo.ranks_of_node(node)
        chunks = sorted(received[node], key=lambda item: (item[0], item[1]))
        holder0 = ranks[leaders[0]]
        leader_ranks = {ranks[l] for l in leaders}
        for r in ranks:
            peers = [q for q in ranks if q != r]
            if plan.load_balance:
                segs = [(f"peer:{q}", Refs.own(q, stores[q].nlocal)) for q in peers]
                if r not in leader_ranks:
                    for q in peers:
                        scatter.append(Transfer("copy", holder0, r, stores[q].nlocal))
                groups: Dict[int, List[Refs]] = {}
                for src_node, _, holder, refs in chunks:
                    groups.setdefault(src_node, []).append(refs)
                    if holder != r:
                        scatter.append(Transfer("copy", holder, r, len(refs)))
                segs.extend((f"node:{n}", Refs.concat(parts)) for n, parts in groups.items())
                layout[r] = segs
            else:
                sub = plan.subboxes[r]
                parts = []
                peer_refs = Refs.concat([Refs.own(q, stores[q].nlocal) for q in peers])
                near = peer_refs.take(sub.in_ghost_region(index.positions_of(peer_refs), c))
                parts.append(near)
                if r not in leader_ranks:
                    scatter.append(Transfer("copy", holder0, r, len(near)))
                for _, _, holder, refs in chunks:
                    mine = refs.take(sub.in_ghost_region(index.positions_of(refs), c))
                    # own atoms only appear through periodic images
                    mine = mine.take(~((mine.owner_rank == r) & ~mine.image.any(axis=1)))
                    parts.append(mine)
                    if holder != r:
                        scatter.append(Transfer("copy", holder, r, len(mine)))
                layout[r] = [("ghost", Refs.concat(parts))]
    return layout, [gather, send, scatter]


_ROUTE_BUILDERS = {
    Scheme.THREE_STAGE: _three_stage_route,
    Scheme.P2P: _p2p_route,
    Scheme.NODE_BASED: _node_based_route,
}


# --------------------------------------------------------------------------
# Exchange operations
# --------------------------------------------------------------------------


def partition_node_box(n_atoms: int, ranks_per_node: int = 4) -> List[Tuple[int, int]]:
    """Contiguous slices of the node's local list; the remainder goes to the lowest ranks."""
    if n_atoms < 0 or ranks_per_node < 1:
        raise InvalidInputError(f"Bad partition request: {n_atoms} atoms over {ranks_per_node} ranks")
    q, rem = divmod(n_atoms, ranks_per_node)
    slices = []
    start = 0
    for k in range(ranks_per_node):
        size = q + (1 if k < rem else 0)
        slices.append((start, start + size))
        start += size
    return slices


def _materialize(store: AtomStore, segs: Sequence[Tuple[str, Refs]], index: _LocalIndex) -> None:
    n = store.nlocal
    own = Refs.own(store.rank, n)
    allrefs = Refs.concat([own] + [refs for _, refs in segs])
    flat = index.flat(allrefs)
    store.positions = index.positions_of(allrefs)
    store.types = index.types[flat]
    store.gids = index.gids[flat]
    store.images = allrefs.image.copy()
    store.owner_rank = allrefs.owner_rank.copy()
    store.owner_index = allrefs.owner_index.copy()
    velocities = np.zeros((len(allrefs), 3))
    velocities[:n] = store.velocities[:n]
    store.velocities = velocities
    store.segments = [("local", 0, n)]
    start = n
    for label, refs in segs:
        store.segments.append((label, start, start + len(refs)))
        start += len(refs)


def _assign_eval_rows(plan: CommPlan, stores: Sequence[AtomStore]) -> None:
    topo = plan.topo
    for node in range(topo.nnodes):
        ranks = topo.ranks_of_node(node)
        node_nlocal = int(sum(stores[r].nlocal for r in ranks))
        slices = partition_node_box(node_nlocal, topo.ranks_per_node)
        for k, r in enumerate(ranks):
            store = stores[r]
            if not plan.load_balance:
                store.node_nlocal = store.nlocal
                store.eval_rows = np.arange(store.nlocal)
                continue
            # node-list order is rank order; this store keeps its own locals first
            order = []
            for q in ranks:
                seg = store.segment("local" if q == r else f"peer:{q}")
                order.append(np.arange(seg.start, seg.stop))
            node_order = np.concatenate(order) if order else np.empty(0, dtype=int)
            lo, hi = slices[k]
            store.node_nlocal = node_nlocal
            store.eval_rows = node_order[lo:hi]


def forward_exchange(plan: CommPlan, cluster: Cluster, domain: Domain) -> SimMetrics:
    """Rebuild every store's halo from the current locals and account the traffic."""
    stores = domain.stores
    if len(stores) != plan.topo.nranks:
        raise InvalidInputError(f"{len(stores)} stores for {plan.topo.nranks} ranks")
    index = _LocalIndex(stores, plan.box)
    layout, stages = _ROUTE_BUILDERS[plan.scheme](plan, index, stores)
    for store, segs in zip(stores, layout):
        _materialize(store, segs, index)
    _assign_eval_rows(plan, stores)
    domain.route = Route(stages=stages, channels=cluster.cost.channels(plan.senders_per_node))
    metrics = domain.route.account(cluster, FORWARD_BYTES, Phase.FORWARD)
    logger.debug(
        f"Forward exchange ({plan.scheme.value}): "
        f"{sum(s.nghost for s in stores)} ghost entries, {metrics.messages} messages"
    )
    return metrics


def update_ghosts(plan: CommPlan, cluster: Cluster, domain: Domain) -> SimMetrics:
    """Refresh remote entries from their owners along the route of the last rebuild."""
    if domain.route is None:
        raise PlanError("update_ghosts called before forward_exchange")
    index = _LocalIndex(domain.stores, plan.box)
    for store in domain.stores:
        if store.nghost:
            remote = Refs(
                store.owner_rank[store.nlocal :],
                store.owner_index[store.nlocal :],
                store.images[store.nlocal :],
            )
            store.positions[store.nlocal :] = index.positions_of(remote)
    return domain.route.account(cluster, FORWARD_BYTES, Phase.FORWARD)


def reverse_force_reduce(
    plan: CommPlan,
    cluster: Cluster,
    domain: Domain,
    results: Sequence[ForceResult],
) -> SimMetrics:
    """Deliver every force record to the owner of its target and sum in canonical order."""
    stores = domain.stores
    if len(results) != len(stores):
        raise InvalidInputError(f"{len(results)} force results for {len(stores)} ranks")
    index = _LocalIndex(stores, plan.box)
    owner_parts: Dict[int, List[tuple]] = {r: [] for r in range(len(stores))}
    for store, result in zip(stores, results):
        targets, gids, slots, forces = result.records()
        if not len(targets):
            continue
        owners = store.owner_rank[targets]
        oidx = store.owner_index[targets]
        flat = index.base[owners] + oidx
        bad = (oidx >= index.counts[owners]) | (index.gids[np.minimum(flat, len(index.gids) - 1)] != store.gids[targets])
        if bad.any():
            g = int(store.gids[targets][np.argmax(bad)])
            raise ConsistencyError(f"Rank {store.rank}: force record for gid {g} has no owner entry", gid=g)
        for owner in np.unique(owners):
            m = owners == owner
            owner_parts[int(owner)].append((oidx[m], gids[m], slots[m], forces[m]))
    for r, store in enumerate(stores):
        parts = owner_parts[r]
        if parts:
            store.forces = reduce_records(
                np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]),
                np.concatenate([p[2] for p in parts]),
                np.concatenate([p[3] for p in parts]),
                store.nlocal,
            )
        else:
            store.forces = np.zeros((store.nlocal, 3))
    if domain.route is None:
        return SimMetrics(nranks=cluster.nranks)
    return domain.route.account(cluster, REVERSE_BYTES, Phase.REVERSE, reverse=True)


def migrate(plan: CommPlan, cluster: Cluster, domain: Domain) -> SimMetrics:
    """Wrap locals, hand atoms that left their sub-box to the new owner, drop halos."""
    topo, box = plan.topo, plan.box
    stores = domain.stores
    pos = np.concatenate([s.positions[: s.nlocal] for s in stores])
    vel = np.concatenate([s.velocities[: s.nlocal] for s in stores])
    types = np.concatenate([s.types[: s.nlocal] for s in stores])
    gids = np.concatenate([s.gids[: s.nlocal] for s in stores])
    old = np.concatenate([np.full(s.nlocal, s.rank, dtype=int) for s in stores])
    wrapped = box.wrap(pos)
    new = locate_ranks(wrapped, box, topo) if len(gids) else np.empty(0, dtype=int)

    moved = np.flatnonzero(new != old)
    pairs: Dict[Tuple[int, int], int] = {}
    for i in moved:
        key = (int(old[i]), int(new[i]))
        pairs[key] = pairs.get(key, 0) + 1
    messages, copies = [], []
    for (src, dst), count in sorted(pairs.items()):
        if topo.node_of(src) == topo.node_of(dst):
            copies.append(CopyRecord(src, dst, MIGRATION_BYTES * count, Phase.MIGRATION))
        else:
            messages.append(Message(src, dst, MIGRATION_BYTES * count, Phase.MIGRATION))
    metrics = simulate_phase(cluster, messages, copies, cluster.cost.channels(topo.ranks_per_node))

    for rank in range(topo.nranks):
        idx = np.flatnonzero(new == rank)
        idx = idx[np.argsort(gids[idx], kind="stable")]
        stores[rank] = AtomStore.from_locals(rank, wrapped[idx], vel[idx], types[idx], gids[idx])
    domain.route = None
    logger.debug(f"Migration: {len(moved)} atoms changed owner")
    return metrics


# --------------------------------------------------------------------------
# Oracles and load balance
# --------------------------------------------------------------------------


def oracle_ghosts(
    positions: np.ndarray,
    gids: np.ndarray,
    region: SubBox,
    cutoff: float,
    box: SimBox,
) -> Set[Tuple[int, Tuple[int, int, int]]]:
    """Every (gid, image) whose image lies in the cutoff-expanded region but outside the region."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    found: Set[Tuple[int, Tuple[int, int, int]]] = set()
    if not len(positions):
        return found
    lengths = box.array
    wrapped = box.wrap(positions)
    reach = [int(np.ceil(cutoff / lengths[d])) + 1 for d in range(3)]
    for image in itertools.product(*[range(-m, m + 1) for m in reach]):
        shifted = wrapped + np.asarray(image) * lengths
        hit = region.in_ghost_region(shifted, cutoff) & ~region.contains(shifted)
        for g in np.asarray(gids)[hit]:
            found.add((int(g), tuple(int(v) for v in image)))
    return found


def sdmr(values: Sequence[float]) -> float:
    """Dispersion metric ``sqrt(population variance / mean) * 100``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UndefinedMetricError("SDMR of an empty series")
    mean = float(arr.mean())
    if mean <= 0:
        raise UndefinedMetricError(f"SDMR needs a positive mean, got {mean}")
    return float(np.sqrt(arr.var() / mean) * 100.0)


@dataclass
class SeriesStats:
    minimum: float
    average: float
    maximum: float
    sdmr: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "SeriesStats":
        arr = np.asarray(values, dtype=np.float64)
        return cls(float(arr.min()), float(arr.mean()), float(arr.max()), sdmr(arr))


@dataclass
class BalanceReport:
    """Per-rank atom counts and evaluation-cost proxies with summary statistics."""

    counts: np.ndarray
    costs: np.ndarray
    natom: SeriesStats
    cost: SeriesStats

    def to_dict(self) -> Dict[str, float]:
        return {
            "natom_min": self.natom.minimum,
            "natom_avg": self.natom.average,
            "natom_max": self.natom.maximum,
            "natom_sdmr": self.natom.sdmr,
            "cost_min": self.cost.minimum,
            "cost_avg": self.cost.average,
            "cost_max": self.cost.maximum,
            "cost_sdmr": self.cost.sdmr,
        }


def balance_report(counts: Sequence[float], costs: Optional[Sequence[float]] = None) -> BalanceReport:
    """Summarize per-rank loads; the cost proxy defaults to the evaluated-atom count."""
    counts = np.asarray(counts, dtype=np.float64)
    costs = counts.copy() if costs is None else np.asarray(costs, dtype=np.float64)
    if counts.shape != costs.shape:
        raise InvalidInputError(f"counts {counts.shape} and costs {costs.shape} differ in length")
    return BalanceReport(counts=counts, costs=costs, natom=SeriesStats.of(counts), cost=SeriesStats.of(costs))


def rank_loads(topo: RankTopology, counts_per_rank: Sequence[int], load_balance: bool) -> np.ndarray:
    """Evaluated atoms per rank, with or without node-box partitioning."""
    counts = np.asarray(counts_per_rank, dtype=int)
    if not load_balance:
        return counts.copy()
    loads = np.zeros_like(counts)
    for node in range(topo.nnodes):
        ranks = topo.ranks_of_node(node)
        slices = partition_node_box(int(counts[ranks].sum()), topo.ranks_per_node)
        for r, (lo, hi) in zip(ranks, slices):
            loads[r] = hi - lo
    return loads


# --------------------------------------------------------------------------
# Exchange benchmark
# --------------------------------------------------------------------------


@dataclass
class ExchangeBenchmark:
    """Counters of one forward exchange plus its reverse reduction."""

    scheme: str
    load_balance: bool
    rounds: int
    peer_count: int
    messages_per_rank: float
    messages: int
    bytes: int
    virtual_time_us: float
    registered_regions: int
    ghosts_per_rank: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "scheme": self.scheme,
            "load_balance": self.load_balance,
            "rounds": self.rounds,
            "peer_count": self.peer_count,
            "messages_per_rank": self.messages_per_rank,
            "messages": self.messages,
            "bytes": self.bytes,
            "virtual_time_us": self.virtual_time_us,
            "registered_regions": self.registered_regions,
            "ghosts_per_rank": self.ghosts_per_rank,
        }


def benchmark_exchange(
    plan: CommPlan,
    cluster: Cluster,
    positions: np.ndarray,
    types: np.ndarray,
    policy: RegistrationPolicy = RegistrationPolicy.PER_NEIGHBOR,
) -> ExchangeBenchmark:
    """Distribute ``positions``, run one forward and one reverse pass and report the traffic.

    ``registered_regions`` is the largest per-rank region count under ``policy``.
    """
    cluster.reset()
    domain = distribute(positions, None, types, plan.box, plan.topo)
    forward_exchange(plan, cluster, domain)
    domain.route.account(cluster, REVERSE_BYTES, Phase.REVERSE, reverse=True)
    regions = register_regions(cluster, policy, plan.neighbor_counts())
    m = cluster.metrics
    return ExchangeBenchmark(
        scheme=plan.scheme.value,
        load_balance=plan.load_balance,
        rounds=plan.round_count,
        peer_count=plan.peer_count,
        messages_per_rank=plan.messages_per_rank,
        messages=m.messages,
        bytes=m.total_bytes,
        virtual_time_us=m.virtual_time_us,
        registered_regions=int(regions.max()) if len(regions) else 0,
        ghosts_per_rank=float(np.mean([s.size - s.ghost_start for s in domain.stores])),
    )
