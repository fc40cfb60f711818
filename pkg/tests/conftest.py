"""Shared fixtures: a small two-type model and cutoff that keep systems desk-sized."""

import json

import pytest

from nodemd.geometry import RankTopology, SimBox
from nodemd.neighbor import CutoffSpec
from nodemd.potential import init_params
from nodemd.structures import random_cluster
from nodemd.validation import capacity_density, random_system


@pytest.fixture
def cutoff():
    return CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, rebuild_every=5, sel=(24, 24))


@pytest.fixture
def params():
    return init_params(3, 2, embed_widths=(4, 8, 8), fit_widths=(16, 16, 16), m2=4)


@pytest.fixture
def one_type():
    """Single-type cutoff and model for dimer and lattice cases."""
    cut = CutoffSpec(rc=3.0, rcs=0.5, skin=0.5, rebuild_every=5, sel=(32,))
    model = init_params(5, 1, embed_widths=(4, 8, 8), fit_widths=(16, 16, 16), m2=4)
    return cut, model


@pytest.fixture
def eight_nodes():
    """32 ranks on a 2x2x2 node grid."""
    return RankTopology((4, 4, 2), (2, 2, 1))


@pytest.fixture
def two_nodes():
    return RankTopology((2, 2, 2), (2, 2, 1))


@pytest.fixture
def system32(cutoff):
    return random_system(32, cutoff, seed=11, min_side=cutoff.list_cutoff / 3.0)


@pytest.fixture
def decomposed_system(cutoff, eight_nodes):
    """Random system on a box whose rank sub-boxes are 0.6 of the communication cutoff."""

    def make(seed: int):
        side = 0.6 * cutoff.list_cutoff
        box = SimBox(tuple(g * side for g in eight_nodes.rank_grid))
        natoms = int(capacity_density(cutoff) * box.volume)
        return random_cluster(natoms, box, ntypes=2, seed=seed)

    return make


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to ``tmp_path/config.json`` and return the path."""

    def write(data: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write


@pytest.fixture
def small_config():
    """A run config that finishes in seconds."""
    return {
        "system": {
            "lattice": {"kind": "random", "natoms": 40, "box": [7.0, 7.0, 7.0], "seed": 2},
            "species": ["A", "B"],
            "masses": {"A": 12.0, "B": 16.0},
        },
        "potential": {
            "rc": 3.0,
            "rcs": 0.5,
            "skin": 0.5,
            "sel": {"A": 24, "B": 24},
            "embed_widths": [4, 8, 8],
            "fit_widths": [16, 16, 16],
            "m2": 4,
        },
        "topology": {"rank_grid": [2, 2, 2], "node_layout": [2, 2, 1]},
        "run": {"steps": 4, "dt": 0.5, "rebuild_every": 2, "thermo_every": 1, "temperature": 100.0},
    }
