import numpy as np
import pytest

from nodemd.engine import evaluate_global
from nodemd.errors import InvalidInputError, ModelError, ParamFileError
from nodemd.geometry import SimBox
from nodemd.neighbor import CutoffSpec, build_neighbor_list
from nodemd.potential import (
    build_env_matrix,
    compute_energy_forces,
    descriptor,
    dump_params,
    init_params,
    load_params,
    parse_params,
    save_params,
    switch_fn,
)
from nodemd.schemes import AtomStore
from nodemd.tsgemm import PrecisionMode
from nodemd.validation import SuiteSettings, check_invariances, finite_difference_forces


BIG_BOX = SimBox((20.0, 20.0, 20.0))


def _store(positions, types):
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    return AtomStore.from_locals(0, positions, np.zeros((n, 3)), np.asarray(types), np.arange(n))


# --------------------------------------------------------------------------
# Switching function
# --------------------------------------------------------------------------


def test_switch_zero_beyond_cutoff():
    assert switch_fn(3.0, 1.0, 3.0) == (0.0, 0.0)
    assert switch_fn(4.5, 1.0, 3.0) == (0.0, 0.0)


def test_switch_continuous_at_onset():
    """At r = rcs the value and slope match the 1/r branch."""
    s, ds = switch_fn(0.5, 0.5, 3.0)
    assert s == pytest.approx(2.0)
    assert ds == pytest.approx(-4.0)


def test_switch_midpoint():
    """Halfway between rcs and rc the quintic is 0.5."""
    s, ds = switch_fn(2.0, 1.0, 3.0)
    assert s == pytest.approx(0.25)
    assert ds == pytest.approx(-0.9375 / 2.0 - 0.5 / 4.0)


def test_switch_derivative_matches_finite_difference():
    r = np.linspace(0.6, 2.9, 25)
    _, ds = switch_fn(r, 0.5, 3.0)
    h = 1e-6
    fd = (switch_fn(r + h, 0.5, 3.0)[0] - switch_fn(r - h, 0.5, 3.0)[0]) / (2 * h)
    np.testing.assert_allclose(ds, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("r", [0.0, -1.0])
def test_switch_rejects_non_positive_distance(r):
    with pytest.raises(InvalidInputError):
        switch_fn(r, 0.5, 3.0)


# --------------------------------------------------------------------------
# Environment matrix and descriptor
# --------------------------------------------------------------------------


def test_env_matrix_isolated_atom_is_zero():
    cut = CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(4,))
    store = _store([[1.0, 1.0, 1.0]], [0])
    env = build_env_matrix(0, build_neighbor_list(store, cut), store, cut)
    assert env.R.shape == (4, 4)
    assert not env.R.any()
    assert not env.mask.any()


def test_env_matrix_axis_neighbor_inside_onset():
    """A +x neighbor at r < rcs gives the row (1/r, 1/r, 0, 0)."""
    cut = CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(4,))
    store = _store([[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]], [0, 0])
    env = build_env_matrix(0, build_neighbor_list(store, cut), store, cut)
    np.testing.assert_allclose(env.R[0], [2.5, 2.5, 0.0, 0.0])
    assert not env.R[1:].any()


def test_env_matrix_slots_follow_type_groups():
    """A type-1 neighbor lands in the first slot after the type-0 block."""
    cut = CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, sel=(3, 2))
    store = _store([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]], [0, 1, 0])
    env = build_env_matrix(0, build_neighbor_list(store, cut), store, cut)
    assert env.neighbor.tolist() == [2, -1, -1, 1, -1]
    assert env.R[0, 3] > 0
    assert env.R[3, 2] == pytest.approx(env.R[3, 0])


def test_env_matrix_excludes_skin_neighbors():
    cut = CutoffSpec(rc=3.0, rcs=0.5, skin=1.0, sel=(4,))
    store = _store([[0.0, 0.0, 0.0], [3.5, 0.0, 0.0]], [0, 0])
    nlist = build_neighbor_list(store, cut)
    assert nlist.counts()[0] == 1
    assert not build_env_matrix(0, nlist, store, cut).R.any()


def test_descriptor_shape_and_rotation_invariance():
    rng = np.random.default_rng(0)
    R = rng.standard_normal((6, 4))
    G = rng.standard_normal((6, 8))
    D = descriptor(R, G, 4)
    assert D.shape == (32,)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    Rr = R.copy()
    Rr[:, 1:] = R[:, 1:] @ q.T
    np.testing.assert_allclose(descriptor(Rr, G, 4), D, rtol=1e-12, atol=1e-14)


# --------------------------------------------------------------------------
# Energies and forces
# --------------------------------------------------------------------------


def test_isolated_atom_has_zero_force(one_type):
    cut, model = one_type
    energy, forces, energies = evaluate_global(np.array([[5.0, 5.0, 5.0]]), np.array([0]), BIG_BOX, model, cut)
    np.testing.assert_array_equal(forces, np.zeros((1, 3)))
    assert np.isfinite(energy)
    assert energies[0] == energy


def test_dimer_forces_are_equal_and_opposite(one_type):
    cut, model = one_type
    bond = np.array([0.6, 0.8, 0.0]) * 1.5
    positions = np.array([[5.0, 5.0, 5.0], [5.0, 5.0, 5.0] + bond])
    _, forces, _ = evaluate_global(positions, np.array([0, 0]), BIG_BOX, model, cut)
    np.testing.assert_allclose(forces[0], -forces[1], atol=1e-10)
    assert np.linalg.norm(np.cross(forces[0], bond)) < 1e-10 * max(1.0, np.linalg.norm(forces[0]))


def test_forces_sum_to_zero(params, cutoff, system32):
    _, forces, _ = evaluate_global(system32.positions, system32.types, system32.box, params, cutoff)
    np.testing.assert_allclose(forces.sum(axis=0), 0.0, atol=1e-10)


def test_forces_match_finite_differences(params, cutoff, system32):
    """Analytic forces equal central differences of the energy."""
    _, forces, _ = evaluate_global(system32.positions, system32.types, system32.box, params, cutoff)

    def energy(p):
        return evaluate_global(p, system32.types, system32.box, params, cutoff)[0]

    atoms = [0, 7, 19]
    fd = finite_difference_forces(energy, system32.positions, atoms, 1e-3)
    err = np.linalg.norm(fd - forces[atoms]) / np.linalg.norm(forces[atoms])
    assert err < 1e-6


def test_energy_is_sum_of_atom_energies(params, cutoff, system32):
    energy, _, energies = evaluate_global(system32.positions, system32.types, system32.box, params, cutoff)
    assert energy == pytest.approx(float(np.sum(energies)), rel=1e-14)


def test_row_subsets_reproduce_full_batch_bitwise(params, cutoff, system32):
    """Evaluating centers one at a time gives the same bits as one batch."""
    store = _store(system32.positions, system32.types)
    nlist = build_neighbor_list(store, cutoff)
    full = compute_energy_forces(store, nlist, params, cutoff)
    for row in (0, 5, 31):
        one = compute_energy_forces(store, nlist, params, cutoff, rows=np.array([row]))
        assert one.atom_energies[0] == full.atom_energies[row]
        np.testing.assert_array_equal(one.self_forces[0], full.self_forces[row])


def test_invariance_checks_pass(params, cutoff):
    checks = check_invariances(params, cutoff, SuiteSettings(seeds=(0,)))
    assert [c.name for c in checks] == ["seed 0 translation", "seed 0 permutation", "seed 0 rotation"]
    assert all(c.passed for c in checks), [(c.name, c.value) for c in checks]


def test_type_count_mismatch_is_a_model_error(params):
    cut = CutoffSpec(rc=3.0, rcs=0.5, sel=(8,))
    store = _store([[0.0, 0.0, 0.0]], [0])
    with pytest.raises(ModelError):
        compute_energy_forces(store, build_neighbor_list(store, cut), params, cut)


@pytest.mark.parametrize("mode, limit", [(PrecisionMode.MIX_FP32, 1e-3), (PrecisionMode.MIX_FP16, 1e-2)])
def test_mixed_precision_force_error(params, cutoff, system32, mode, limit):
    """Reduced-precision forces stay within their RMS error budget."""
    args = (system32.positions, system32.types, system32.box)
    _, ref, _ = evaluate_global(*args, params, cutoff)
    _, got, _ = evaluate_global(*args, params.with_precision(mode), cutoff)
    rms = np.sqrt(np.mean((got - ref) ** 2)) / np.sqrt(np.mean(ref**2))
    assert 0.0 < rms < limit


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def test_init_params_is_deterministic():
    a = init_params(9, 2, embed_widths=(4, 8), fit_widths=(8,), m2=2)
    b = init_params(9, 2, embed_widths=(4, 8), fit_widths=(8,), m2=2)
    assert dump_params(a) == dump_params(b)
    c = init_params(10, 2, embed_widths=(4, 8), fit_widths=(8,), m2=2)
    assert dump_params(a) != dump_params(c)


def test_layer_shapes(params):
    assert params.m1 == 8
    assert params.descriptor_dim == 32
    assert params.embedding[(0, 1)].shapes == [(1, 4), (4, 8), (8, 8)]
    assert params.fitting[1].shapes == [(32, 16), (16, 16), (16, 16), (16, 1)]
    assert params.fitting[0].layers[-1].activation == "linear"


def test_m2_larger_than_m1_rejected():
    with pytest.raises(ModelError):
        init_params(0, 1, embed_widths=(4, 4), fit_widths=(8,), m2=5)


def test_param_file_round_trip(tmp_path, params, cutoff, system32):
    """A saved model reloads to bitwise-identical energies."""
    path = save_params(params, tmp_path / "model" / "params.txt")
    loaded = load_params(path)
    args = (system32.positions, system32.types, system32.box)
    assert evaluate_global(*args, loaded, cutoff)[0] == evaluate_global(*args, params, cutoff)[0]


@pytest.mark.parametrize(
    "text, line",
    [
        ("", 1),
        ("SOMETHING 1\n", 1),
        ("NODEMD-PARAMS 1\nmeta 1 2\n1.0 abc\n", 3),
        ("NODEMD-PARAMS 1\nmeta 1 2\n1.0 4.0\nfit.0.w0 2 1\n0.5\n", 6),
        ("NODEMD-PARAMS 1\nmeta 1\n", 2),
        ("NODEMD-PARAMS 1\nmeta 1 2\n1.0 nan\n", 3),
    ],
)
def test_param_file_errors_carry_line_numbers(text, line):
    with pytest.raises(ParamFileError) as excinfo:
        parse_params(text)
    assert excinfo.value.line == line


def test_load_params_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_params(tmp_path / "absent.txt")
