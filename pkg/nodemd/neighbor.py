"""
Cell-indexed Verlet neighbor lists with a skin distance.

Periodicity is handled by explicit ghost atoms: lists are built over the atoms
of one store (locals plus ghosts) and never fold coordinates.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityExceededError, InvalidInputError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CutoffSpec:
    """Cutoff radii, skin and per-type neighbor capacity."""

    rc: float
    rcs: float
    skin: float = 2.0
    rebuild_every: int = 50
    sel: Tuple[int, ...] = (46, 92)

    def __post_init__(self):
        if not 0 < self.rcs < self.rc:
            raise InvalidInputError(f"Need 0 < rcs < rc, got rcs={self.rcs}, rc={self.rc}")
        if self.skin < 0:
            raise InvalidInputError(f"skin must be >= 0, got {self.skin}")
        if self.rebuild_every < 1:
            raise InvalidInputError(f"rebuild_every must be >= 1, got {self.rebuild_every}")
        sel = tuple(int(s) for s in self.sel)
        if not sel or any(s < 0 for s in sel):
            raise InvalidInputError(f"sel must list non-negative capacities, got {self.sel}")
        object.__setattr__(self, "sel", sel)

    @property
    def list_cutoff(self) -> float:
        return self.rc + self.skin

    @property
    def ntypes(self) -> int:
        return len(self.sel)

    @property
    def nnei(self) -> int:
        """Padded environment-matrix row count."""
        return int(sum(self.sel))


@dataclass
class CellIndex:
    """Atoms binned into a regular grid of cells covering a region."""

    lo: np.ndarray
    cell_width: np.ndarray
    ncells: np.ndarray
    cell_of: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    def flat(self, cell: np.ndarray) -> int:
        nx, ny, _ = self.ncells
        return int(cell[0] + nx * (cell[1] + ny * cell[2]))

    def atoms_in(self, cell: np.ndarray) -> np.ndarray:
        if np.any(cell < 0) or np.any(cell >= self.ncells):
            return np.empty(0, dtype=int)
        f = self.flat(cell)
        return self.order[self.starts[f] : self.starts[f + 1]]

    def stencil(self, cell: np.ndarray) -> np.ndarray:
        """Atoms in a cell and its 26 neighbors."""
        parts = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    parts.append(self.atoms_in(cell + np.array([dx, dy, dz])))
        return np.concatenate(parts) if parts else np.empty(0, dtype=int)

    def occupied(self):
        """Yield (cell coords, member atoms) for every non-empty cell."""
        counts = np.diff(self.starts)
        nx, ny, _ = self.ncells
        for f in np.nonzero(counts)[0]:
            cell = np.array([f % nx, (f // nx) % ny, f // (nx * ny)])
            yield cell, self.order[self.starts[f] : self.starts[f + 1]]


def build_cell_index(
    positions: np.ndarray,
    cell_size: float,
    lo: Optional[np.ndarray] = None,
    hi: Optional[np.ndarray] = None,
) -> CellIndex:
    """Bin atoms into cells no narrower than ``cell_size``.

    The region defaults to the bounding box of the positions.
    """
    if cell_size <= 0:
        raise InvalidInputError(f"cell_size must be positive, got {cell_size}")
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return CellIndex(
            lo=np.zeros(3),
            cell_width=np.full(3, float(cell_size)),
            ncells=np.ones(3, dtype=int),
            cell_of=np.empty((0, 3), dtype=int),
            order=np.empty(0, dtype=int),
            starts=np.zeros(2, dtype=int),
        )
    lo = p.min(axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = p.max(axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    extent = np.maximum(hi - lo, 0.0)
    ncells = np.maximum(np.floor(extent / cell_size).astype(int), 1)
    width = np.where(extent > 0, extent / ncells, cell_size)
    cell_of = np.clip(np.floor((p - lo) / width).astype(int), 0, ncells - 1)
    flat = cell_of[:, 0] + ncells[0] * (cell_of[:, 1] + ncells[1] * cell_of[:, 2])
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(int(np.prod(ncells)) + 1))
    return CellIndex(
        lo=lo, cell_width=width, ncells=ncells, cell_of=cell_of, order=order, starts=starts
    )


@dataclass
class NeighborList:
    """Per-center neighbors within rc + skin in CSR form, grouped by neighbor type.

    Row ``c`` spans ``indices[offsets[c]:offsets[c + 1]]``; its type-``t`` group
    spans ``type_offsets[c, t]:type_offsets[c, t + 1]`` (absolute positions in
    ``indices``). Within a group neighbors are ordered by (global id, image).
    """

    centers: np.ndarray
    offsets: np.ndarray
    indices: np.ndarray
    type_offsets: np.ndarray
    sel: Tuple[int, ...]
    cutoff: float

    @property
    def ncenters(self) -> int:
        return len(self.centers)

    def neighbors(self, c: int) -> np.ndarray:
        return self.indices[self.offsets[c] : self.offsets[c + 1]]

    def group(self, c: int, t: int) -> np.ndarray:
        return self.indices[self.type_offsets[c, t] : self.type_offsets[c, t + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)


def _canonical_order(idx: np.ndarray, types, gids, images) -> np.ndarray:
    im = images[idx]
    return idx[np.lexsort((im[:, 2], im[:, 1], im[:, 0], gids[idx], types[idx]))]


def build_neighbor_list(
    atoms,
    cutoff: CutoffSpec,
    centers: Optional[Sequence[int]] = None,
) -> NeighborList:
    """Build lists for ``centers`` (default: the store's locals) over all store atoms.

    ``atoms`` exposes ``positions``, ``types``, ``gids``, ``images`` and ``nlocal``.
    Ghosts must already cover rc + skin around every center.
    """
    positions = np.asarray(atoms.positions, dtype=np.float64)
    types = np.asarray(atoms.types, dtype=int)
    gids = np.asarray(atoms.gids, dtype=np.int64)
    images = np.asarray(atoms.images, dtype=int).reshape(-1, 3)
    if centers is None:
        centers = np.arange(atoms.nlocal)
    centers = np.asarray(centers, dtype=int)
    ntypes = cutoff.ntypes
    if len(types) and types.max() >= ntypes:
        raise InvalidInputError(f"Atom type {types.max()} has no sel entry (ntypes={ntypes})")

    rlist = cutoff.list_cutoff
    rlist2 = rlist * rlist
    rows = [np.empty(0, dtype=int)] * len(centers)

    if len(centers):
        index = build_cell_index(positions, rlist)
        center_cells = index.cell_of[centers]
        flat = center_cells[:, 0] + index.ncells[0] * (
            center_cells[:, 1] + index.ncells[1] * center_cells[:, 2]
        )
        for f in np.unique(flat):
            members = np.nonzero(flat == f)[0]
            candidates = index.stencil(center_cells[members[0]])
            diff = positions[candidates][None, :, :] - positions[centers[members]][:, None, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            for row, c in enumerate(members):
                keep = (d2[row] <= rlist2) & (candidates != centers[c])
                rows[c] = _canonical_order(candidates[keep], types, gids, images)

    counts = np.array([len(r) for r in rows], dtype=int)
    offsets = np.zeros(len(centers) + 1, dtype=int)
    np.cumsum(counts, out=offsets[1:])
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=int)
    type_offsets = np.zeros((len(centers), ntypes + 1), dtype=int)
    for c, row in enumerate(rows):
        per_type = np.bincount(types[row], minlength=ntypes)
        type_offsets[c] = offsets[c] + np.concatenate(([0], np.cumsum(per_type)))
        d = positions[row] - positions[centers[c]]
        inside = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]) < cutoff.rc
        within = np.bincount(types[row][inside], minlength=ntypes)
        for t in range(ntypes):
            if within[t] > cutoff.sel[t]:
                raise CapacityExceededError(int(gids[centers[c]]), t, int(within[t]), cutoff.sel[t])

    logger.debug(
        f"Neighbor list: {len(centers)} centers, {len(indices)} entries, "
        f"max {counts.max() if len(counts) else 0} per center"
    )
    return NeighborList(
        centers=centers,
        offsets=offsets,
        indices=indices,
        type_offsets=type_offsets,
        sel=cutoff.sel,
        cutoff=rlist,
    )


def needs_rebuild(step: int, cutoff: CutoffSpec) -> bool:
    """True on steps where lists, ghosts and ownership are rebuilt."""
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    return step % cutoff.rebuild_every == 0
