import numpy as np
import pytest

from nodemd.errors import InvalidInputError
from nodemd.geometry import SimBox
from nodemd.structures import (
    CU_LATTICE,
    HOH_ANGLE,
    OH_BOND,
    Structure,
    fcc_lattice,
    iter_xyz,
    random_cluster,
    read_xyz,
    uniform_cloud,
    water_lattice,
    write_xyz,
)


def _minimum_image(d, box):
    L = box.array
    return d - L * np.round(d / L)


def test_fcc_counts_and_box():
    s = fcc_lattice((2, 3, 1))
    assert s.natoms == 4 * 6
    assert s.box.lengths == pytest.approx((2 * CU_LATTICE, 3 * CU_LATTICE, CU_LATTICE))
    assert s.species == ("Cu",)


def test_fcc_nearest_neighbor_distance():
    """Every fcc site has 12 neighbors at a / sqrt(2)."""
    s = fcc_lattice((3, 3, 3))
    d = _minimum_image(s.positions - s.positions[0], s.box)
    r = np.linalg.norm(d[1:], axis=1)
    assert np.isclose(r, CU_LATTICE / np.sqrt(2)).sum() == 12
    assert r.min() == pytest.approx(CU_LATTICE / np.sqrt(2))


@pytest.mark.parametrize("cells", [(0, 1, 1), (1, 1)])
def test_lattices_reject_bad_cells(cells):
    with pytest.raises(InvalidInputError):
        fcc_lattice(cells)
    with pytest.raises(InvalidInputError):
        water_lattice(cells)


def test_water_molecule_geometry():
    s = water_lattice((2, 2, 2), seed=4)
    assert s.natoms == 24
    assert s.species == ("O", "H")
    assert s.types[:3].tolist() == [0, 1, 1]
    o, h1, h2 = s.positions[:3]
    b1 = _minimum_image(h1 - o, s.box)
    b2 = _minimum_image(h2 - o, s.box)
    assert np.linalg.norm(b1) == pytest.approx(OH_BOND)
    assert np.linalg.norm(b2) == pytest.approx(OH_BOND)
    angle = np.degrees(np.arccos(b1 @ b2 / (np.linalg.norm(b1) * np.linalg.norm(b2))))
    assert angle == pytest.approx(HOH_ANGLE)


def test_water_orientation_follows_seed():
    a = water_lattice((1, 1, 1), seed=1)
    np.testing.assert_array_equal(a.positions, water_lattice((1, 1, 1), seed=1).positions)
    assert not np.array_equal(a.positions, water_lattice((1, 1, 1), seed=2).positions)


def test_random_cluster_inside_box():
    box = SimBox((5.0, 6.0, 7.0))
    s = random_cluster(50, box, ntypes=3, seed=9)
    assert s.natoms == 50
    assert ((s.positions >= 0) & (s.positions < box.array)).all()
    assert set(s.types.tolist()) <= {0, 1, 2}
    assert s.species == ("X0", "X1", "X2")


def test_random_cluster_keeps_min_distance():
    box = SimBox((8.0, 8.0, 8.0))
    s = random_cluster(27, box, seed=1, min_distance=2.0)
    d = _minimum_image(s.positions[:, None, :] - s.positions[None, :, :], box)
    r = np.linalg.norm(d, axis=-1)[np.triu_indices(27, 1)]
    assert r.min() >= 2.0 - 1e-12


def test_empty_cluster():
    s = random_cluster(0, SimBox((3.0, 3.0, 3.0)))
    assert s.natoms == 0
    with pytest.raises(InvalidInputError):
        random_cluster(-1, SimBox((3.0, 3.0, 3.0)))


def test_structure_validation():
    box = SimBox((2.0, 2.0, 2.0))
    with pytest.raises(InvalidInputError):
        Structure(np.zeros((2, 3)), [0], ("A",), box)
    with pytest.raises(InvalidInputError):
        Structure(np.zeros((1, 3)), [1], ("A",), box)
    with pytest.raises(InvalidInputError):
        Structure(np.zeros((2, 3)), [0, 0], ("A",), box, velocities=np.zeros((1, 3)))


def test_masses_from_table():
    s = water_lattice((1, 1, 1))
    np.testing.assert_allclose(s.masses(), [15.999, 1.008])
    with pytest.raises(InvalidInputError):
        uniform_cloud(3, SimBox((2.0, 2.0, 2.0))).masses()


# --------------------------------------------------------------------------
# Extended XYZ
# --------------------------------------------------------------------------


def test_xyz_round_trip_is_exact(tmp_path):
    s = water_lattice((2, 1, 1), seed=3)
    s.velocities = np.random.default_rng(0).standard_normal((s.natoms, 3))
    back = read_xyz(write_xyz(s, tmp_path / "w.xyz"))
    np.testing.assert_array_equal(back.positions, s.positions)
    np.testing.assert_array_equal(back.velocities, s.velocities)
    assert back.types.tolist() == s.types.tolist()
    assert back.box == s.box


def test_xyz_appends_frames(tmp_path):
    path = tmp_path / "t.xyz"
    box = SimBox((4.0, 4.0, 4.0))
    for seed in range(3):
        write_xyz(uniform_cloud(5, box, seed=seed), path, append=seed > 0, comment=f"step={seed}")
    frames = list(iter_xyz(path))
    assert len(frames) == 3
    assert frames[0].velocities is None


def test_xyz_plain_box_comment(tmp_path):
    path = tmp_path / "plain.xyz"
    path.write_text("2\n5 6 7\nAr 0 0 0\nKr 1 1 1\n", encoding="utf-8")
    s = read_xyz(path)
    assert s.box.lengths == (5.0, 6.0, 7.0)
    assert s.species == ("Ar", "Kr")


def test_xyz_species_order_given(tmp_path):
    path = tmp_path / "w.xyz"
    path.write_text("2\n5 5 5\nH 0 0 0\nO 1 1 1\n", encoding="utf-8")
    s = read_xyz(path, species=("O", "H"))
    assert s.types.tolist() == [1, 0]


@pytest.mark.parametrize(
    "text",
    [
        "two\n5 5 5\nH 0 0 0\n",
        "1\nno box here\nH 0 0 0\n",
        "2\n5 5 5\nH 0 0 0\n",
        "1\n5 5 5\nH 0 0\n",
        "1\n5 5 5\nH 0 x 0\n",
        '1\nLattice="5 1 0 0 5 0 0 0 5"\nH 0 0 0\n',
        "",
    ],
)
def test_xyz_malformed(tmp_path, text):
    path = tmp_path / "bad.xyz"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(InvalidInputError):
        read_xyz(path)


def test_xyz_unknown_species(tmp_path):
    path = tmp_path / "w.xyz"
    path.write_text("1\n5 5 5\nC 0 0 0\n", encoding="utf-8")
    with pytest.raises(InvalidInputError):
        read_xyz(path, species=("O", "H"))


def test_xyz_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_xyz(tmp_path / "absent.xyz")
