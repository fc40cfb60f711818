import itertools

import numpy as np
import pytest

from nodemd.errors import CapacityExceededError, InvalidInputError
from nodemd.neighbor import CutoffSpec, build_cell_index, build_neighbor_list, needs_rebuild
from nodemd.schemes import AtomStore


def _store(positions, types=None):
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    types = np.zeros(n, dtype=int) if types is None else np.asarray(types)
    return AtomStore.from_locals(0, positions, np.zeros((n, 3)), types, np.arange(n))


def test_dimer_inside_cutoff():
    """Two atoms 1 A apart see each other."""
    store = _store([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    nlist = build_neighbor_list(store, CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(4,)))
    assert list(nlist.neighbors(0)) == [1]
    assert list(nlist.neighbors(1)) == [0]


def test_dimer_outside_list_cutoff():
    """Two atoms 4 A apart are beyond rc + skin = 3.5 A."""
    store = _store([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
    nlist = build_neighbor_list(store, CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(4,)))
    np.testing.assert_array_equal(nlist.counts(), [0, 0])


def test_skin_atoms_are_listed():
    """An atom between rc and rc + skin is on the list."""
    store = _store([[0.0, 0.0, 0.0], [3.2, 0.0, 0.0]])
    nlist = build_neighbor_list(store, CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(1,)))
    assert nlist.counts().tolist() == [1, 1]


def test_simple_cubic_interior_atoms_have_six_neighbors():
    """Interior atoms of a unit simple-cubic grid have six neighbors at rc + skin = 1.1."""
    grid = np.array(list(itertools.product(range(4), repeat=3)), dtype=float)
    interior = np.nonzero(((grid > 0) & (grid < 3)).all(axis=1))[0]
    nlist = build_neighbor_list(
        _store(grid), CutoffSpec(rc=1.05, rcs=0.5, skin=0.05, sel=(6,)), centers=interior
    )
    assert nlist.counts().tolist() == [6] * len(interior)
    for c, i in enumerate(interior):
        d = np.linalg.norm(grid[nlist.neighbors(c)] - grid[i], axis=1)
        np.testing.assert_allclose(d, 1.0)


def test_matches_brute_force():
    """Cell-indexed lists equal the O(N^2) pair search."""
    rng = np.random.default_rng(3)
    positions = rng.uniform(0.0, 8.0, size=(60, 3))
    types = rng.integers(0, 2, size=60)
    cutoff = CutoffSpec(rc=2.0, rcs=0.5, skin=0.5, sel=(60, 60))
    nlist = build_neighbor_list(_store(positions, types), cutoff)
    d = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    for i in range(60):
        expected = {j for j in range(60) if j != i and d[i, j] <= 2.5}
        assert set(nlist.neighbors(i).tolist()) == expected


def test_groups_are_type_sorted_then_gid_sorted():
    """Type groups are contiguous and ordered by global id."""
    positions = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]]
    types = [0, 1, 0, 1, 0]
    nlist = build_neighbor_list(
        _store(positions, types), CutoffSpec(rc=2.0, rcs=0.5, skin=0.0, sel=(4, 4)), centers=[0]
    )
    assert nlist.group(0, 0).tolist() == [2, 4]
    assert nlist.group(0, 1).tolist() == [1, 3]
    assert nlist.neighbors(0).tolist() == [2, 4, 1, 3]


def test_capacity_exceeded_names_the_atom():
    """Two same-type neighbors inside rc overflow sel = 1."""
    store = _store([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(CapacityExceededError) as excinfo:
        build_neighbor_list(store, CutoffSpec(rc=1.5, rcs=0.5, skin=0.0, sel=(1,)))
    assert excinfo.value.gid == 1


def test_skin_neighbors_do_not_count_against_capacity():
    """Only neighbors strictly inside rc are checked against sel."""
    store = _store([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.4, 0.0, 0.0]])
    nlist = build_neighbor_list(store, CutoffSpec(rc=1.5, rcs=0.5, skin=1.0, sel=(1,)), centers=[0])
    assert nlist.counts().tolist() == [2]


def test_unknown_type_rejected():
    """A type index without a sel entry is invalid."""
    store = _store([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], types=[0, 2])
    with pytest.raises(InvalidInputError):
        build_neighbor_list(store, CutoffSpec(rc=3.0, rcs=0.5, sel=(4, 4)))


def test_empty_centers():
    """No centers give an empty list."""
    store = _store([[0.0, 0.0, 0.0]])
    nlist = build_neighbor_list(store, CutoffSpec(rc=3.0, rcs=0.5, sel=(4,)), centers=[])
    assert nlist.ncenters == 0
    assert len(nlist.indices) == 0


@pytest.mark.parametrize("step, expected", [(0, True), (1, False), (49, False), (50, True), (100, True)])
def test_needs_rebuild(step, expected):
    """Rebuilds happen on multiples of rebuild_every."""
    assert needs_rebuild(step, CutoffSpec(rc=6.0, rcs=0.5, rebuild_every=50)) is expected


def test_needs_rebuild_rejects_negative_step():
    with pytest.raises(InvalidInputError):
        needs_rebuild(-1, CutoffSpec(rc=6.0, rcs=0.5))


@pytest.mark.parametrize(
    "kwargs",
    [dict(rc=1.0, rcs=1.0), dict(rc=1.0, rcs=0.5, skin=-0.1), dict(rc=1.0, rcs=0.5, rebuild_every=0)],
)
def test_cutoff_spec_validation(kwargs):
    """rcs >= rc, negative skin and zero rebuild interval are rejected."""
    with pytest.raises(InvalidInputError):
        CutoffSpec(**kwargs)


def test_cell_index_covers_every_atom_once():
    """Each atom appears in exactly one cell."""
    rng = np.random.default_rng(0)
    positions = rng.uniform(0.0, 10.0, size=(200, 3))
    index = build_cell_index(positions, 2.5)
    assert (index.ncells == 3).all()
    seen = np.concatenate([members for _, members in index.occupied()])
    assert sorted(seen.tolist()) == list(range(200))
    assert (index.cell_width >= 2.5 - 1e-12).all()


def test_cell_index_single_atom():
    index = build_cell_index(np.array([[1.0, 2.0, 3.0]]), 0.7)
    assert [members.tolist() for _, members in index.occupied()] == [[0]]


def test_cell_index_cube_corners_share_one_cell():
    """Corners of a 2^3 cube with cell size 2 fall into a single cell."""
    corners = 2.0 * np.array(list(itertools.product((0, 1), repeat=3)), dtype=float)
    index = build_cell_index(corners, 2.0)
    assert index.ncells.tolist() == [1, 1, 1]
    assert len(index.atoms_in(np.zeros(3, dtype=int))) == 8


def test_cell_index_empty():
    index = build_cell_index(np.empty((0, 3)), 1.0)
    assert list(index.occupied()) == []
