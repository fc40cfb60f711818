"""
Periodic simulation box, rank/node domain decomposition and the analytic
ghost-count model.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidTopologyError


logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]
Int3 = Tuple[int, int, int]


@dataclass(frozen=True)
class SimBox:
    """Orthogonal box, periodic in all three dimensions."""

    lengths: Vec3

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        if len(lengths) != 3:
            raise InvalidInputError(f"Box needs 3 side lengths, got {len(lengths)}")
        if not all(np.isfinite(v) and v > 0 for v in lengths):
            raise InvalidInputError(f"Box side lengths must be positive: {lengths}")
        object.__setattr__(self, "lengths", lengths)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(np.prod(self.array))

    def wrap(self, positions: np.ndarray) -> np.ndarray:
        """Map coordinates into [0, L_d). Idempotent."""
        return wrap_positions(positions, self.array)


@dataclass(frozen=True)
class RankTopology:
    """Rank grid grouped into nodes of ``prod(node_layout)`` ranks.

    Ranks are numbered node-major: node ``n`` owns ranks
    ``n * ranks_per_node ... (n + 1) * ranks_per_node - 1``.
    """

    rank_grid: Int3
    node_layout: Int3 = (2, 2, 1)
    node_grid: Int3 = field(init=False)

    def __post_init__(self):
        grid = tuple(int(v) for v in self.rank_grid)
        layout = tuple(int(v) for v in self.node_layout)
        if len(grid) != 3 or len(layout) != 3:
            raise InvalidTopologyError("rank_grid and node_layout need 3 entries each")
        if any(v <= 0 for v in grid):
            raise InvalidTopologyError(f"Rank counts must be positive: {grid}")
        if any(v <= 0 for v in layout):
            raise InvalidTopologyError(f"Node layout entries must be positive: {layout}")
        if any(g % n for g, n in zip(grid, layout)):
            raise InvalidTopologyError(
                f"rank_grid {grid} is not divisible by node_layout {layout}"
            )
        object.__setattr__(self, "rank_grid", grid)
        object.__setattr__(self, "node_layout", layout)
        object.__setattr__(self, "node_grid", tuple(g // n for g, n in zip(grid, layout)))

    @property
    def ranks_per_node(self) -> int:
        return int(np.prod(self.node_layout))

    @property
    def nranks(self) -> int:
        return int(np.prod(self.rank_grid))

    @property
    def nnodes(self) -> int:
        return int(np.prod(self.node_grid))

    def node_coords(self, node_id: int) -> np.ndarray:
        self._check_node(node_id)
        nx, ny, _ = self.node_grid
        return np.array([node_id % nx, (node_id // nx) % ny, node_id // (nx * ny)])

    def node_id(self, coords) -> int:
        """Node id of (possibly out-of-range) node coordinates, wrapped on the torus."""
        c = np.mod(np.asarray(coords, dtype=int), self.node_grid)
        nx, ny, _ = self.node_grid
        return int(c[0] + nx * (c[1] + ny * c[2]))

    def local_coords(self, local_index: int) -> np.ndarray:
        lx, ly, _ = self.node_layout
        return np.array([local_index % lx, (local_index // lx) % ly, local_index // (lx * ly)])

    def rank_coords(self, rank: int) -> np.ndarray:
        self._check_rank(rank)
        node, local = divmod(rank, self.ranks_per_node)
        return self.node_coords(node) * np.asarray(self.node_layout) + self.local_coords(local)

    def rank_id(self, coords) -> int:
        """Rank id of (possibly out-of-range) grid coordinates, wrapped periodically."""
        c = np.mod(np.asarray(coords, dtype=int), self.rank_grid)
        layout = np.asarray(self.node_layout)
        node = self.node_id(c // layout)
        lc = c % layout
        local = int(lc[0] + layout[0] * (lc[1] + layout[1] * lc[2]))
        return node * self.ranks_per_node + local

    def node_of(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.ranks_per_node

    def local_index(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.ranks_per_node

    def ranks_of_node(self, node_id: int) -> List[int]:
        self._check_node(node_id)
        base = node_id * self.ranks_per_node
        return list(range(base, base + self.ranks_per_node))

    def torus_neighbor(self, node_id: int, dim: int, step: int) -> int:
        """Node reached from ``node_id`` by ``step`` hops along ``dim`` (periodic)."""
        coords = self.node_coords(node_id)
        coords[dim] += step
        return self.node_id(coords)

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.nranks:
            raise InvalidTopologyError(f"Rank {rank} out of range [0, {self.nranks})")

    def _check_node(self, node_id: int) -> None:
        if not 0 <= node_id < self.nnodes:
            raise InvalidTopologyError(f"Node {node_id} out of range [0, {self.nnodes})")


@dataclass(frozen=True)
class SubBox:
    """Axis-aligned region [lo, hi) owned by a rank (or a node for node-boxes)."""

    lo: Vec3
    hi: Vec3
    owner: int

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def sides(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Half-open membership test on wrapped coordinates."""
        p = np.atleast_2d(points)
        return np.all((p >= self.lo_array) & (p < self.hi_array), axis=1)

    def in_ghost_region(self, points: np.ndarray, cutoff: float) -> np.ndarray:
        """Strict test for the region expanded by ``cutoff`` in every direction.

        A point at exactly ``cutoff`` from a face is outside.
        """
        p = np.atleast_2d(points)
        return np.all(
            (p > self.lo_array - cutoff) & (p < self.hi_array + cutoff), axis=1
        )


@dataclass(frozen=True)
class GhostCounts:
    """Ghost atom counts at unit density for sub-box side ``a`` and cutoff ``r``."""

    a: float
    r: float
    nghost_bs: float
    nghost_lb: float

    @property
    def ratio(self) -> float:
        return self.nghost_lb / self.nghost_bs if self.nghost_bs else float("inf")


def wrap_positions(positions: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Wrap coordinates into [0, L_d)."""
    p = np.asarray(positions, dtype=np.float64)
    if np.isnan(p).any():
        raise InvalidInputError("NaN coordinate")
    wrapped = np.mod(p, lengths)
    # fmod of a tiny negative value rounds up to L itself
    return np.where(wrapped >= lengths, 0.0, wrapped)


def split_points(length: float, parts: int) -> np.ndarray:
    """Split coordinates ``i * L / p`` for i = 0..p."""
    return np.array([i * length / parts for i in range(parts + 1)])


def decompose(box: SimBox, topo: RankTopology) -> List[SubBox]:
    """Return one sub-box per rank, indexed by rank id."""
    splits = [split_points(box.lengths[d], topo.rank_grid[d]) for d in range(3)]
    subboxes = []
    for rank in range(topo.nranks):
        c = topo.rank_coords(rank)
        lo = tuple(float(splits[d][c[d]]) for d in range(3))
        hi = tuple(float(splits[d][c[d] + 1]) for d in range(3))
        subboxes.append(SubBox(lo=lo, hi=hi, owner=rank))
    return subboxes


def locate_ranks(positions: np.ndarray, box: SimBox, topo: RankTopology) -> np.ndarray:
    """Owner rank of every position; a coordinate equal to a split belongs to the higher cell."""
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if not np.isfinite(p).all():
        raise InvalidInputError("Positions must be finite")
    wrapped = box.wrap(p)
    cells = np.empty(wrapped.shape, dtype=int)
    for d in range(3):
        inner = split_points(box.lengths[d], topo.rank_grid[d])[1:-1]
        cells[:, d] = np.searchsorted(inner, wrapped[:, d], side="right")
    return np.array([topo.rank_id(c) for c in cells], dtype=int)


def locate_rank(position, box: SimBox, topo: RankTopology) -> int:
    """Owner rank of a single position."""
    return int(locate_ranks(np.asarray(position, dtype=np.float64)[None, :], box, topo)[0])


def node_box(topo: RankTopology, box: SimBox, node_id: int) -> SubBox:
    """Union bounding box of the sub-boxes of one node."""
    subs = decompose(box, topo)
    members = [subs[r] for r in topo.ranks_of_node(node_id)]
    lo = tuple(float(min(s.lo[d] for s in members)) for d in range(3))
    hi = tuple(float(max(s.hi[d] for s in members)) for d in range(3))
    return SubBox(lo=lo, hi=hi, owner=node_id)


def ghost_count_model(a: float, r: float) -> GhostCounts:
    """Per-rank ghost counts for the original and the load-balanced organization."""
    if not np.isfinite(a) or a <= 0:
        raise InvalidInputError(f"Sub-box side must be positive, got {a}")
    if not np.isfinite(r) or r < 0:
        raise InvalidInputError(f"Cutoff must be non-negative, got {r}")
    nghost_bs = (a + 2 * r) ** 3 - a**3
    nghost_lb = (2 * a + 2 * r) * (2 * a + 2 * r) * (a + 2 * r) - a**3
    return GhostCounts(a=a, r=r, nghost_bs=nghost_bs, nghost_lb=nghost_lb)


def layers_needed(sides: np.ndarray, cutoff: float) -> np.ndarray:
    """Communication layers per dimension, ``ceil(cutoff / side)`` (at least 1)."""
    ratio = cutoff / np.asarray(sides, dtype=np.float64)
    # guard against 0.9999999 rounding up to an extra layer
    layers = np.ceil(ratio - 1e-9).astype(int)
    return np.maximum(layers, 1)
