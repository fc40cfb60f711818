from pathlib import Path

import pytest

from nodemd.config import config_from_dict, parse_config
from nodemd.errors import ConfigError, ErrorCodes, InvalidInputError
from nodemd.potential import init_params, save_params
from nodemd.structures import fcc_lattice, write_xyz
from nodemd.tsgemm import PrecisionMode


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
FCC = {"lattice": {"kind": "fcc", "cells": [1, 1, 1]}}


def _error(data: dict) -> ConfigError:
    with pytest.raises(ConfigError) as excinfo:
        config_from_dict(data)
    return excinfo.value


def test_error_info_carries_code_and_path():
    info = ConfigError("must be positive", path="run.dt").info().to_dict()
    assert info == {
        "code": ErrorCodes.CONFIG_CONSTRAINT,
        "message": "run.dt: must be positive",
        "data": {"path": "run.dt"},
    }
    assert InvalidInputError("bad").info().to_dict() == {"code": ErrorCodes.INVALID_INPUT, "message": "bad"}


def test_copper_defaults():
    cfg = config_from_dict({"system": FCC})
    assert cfg.species == ("Cu",)
    assert cfg.system_kind == "copper"
    assert (cfg.rc, cfg.dt) == (8.0, 1.0)
    assert cfg.sel() == (512,)
    assert cfg.masses() == (63.546,)
    assert cfg.cutoff_spec().list_cutoff == 10.0


def test_water_defaults():
    cfg = config_from_dict({"system": {"lattice": {"kind": "water", "cells": [2, 2, 2]}}})
    assert cfg.species == ("O", "H")
    assert cfg.system_kind == "water"
    assert (cfg.rc, cfg.dt) == (6.0, 0.5)
    assert cfg.sel() == (46, 92)


def test_sel_override_keeps_other_defaults():
    cfg = config_from_dict({"system": {"lattice": {"kind": "water"}}, "potential": {"sel": {"H": 80}}})
    assert cfg.sel() == (46, 80)


def test_runtime_objects(small_config):
    cfg = config_from_dict(small_config)
    run = cfg.run_config()
    assert run.masses == (12.0, 16.0)
    assert run.dt == 0.5
    assert run.scheme == "node-based"
    assert cfg.cutoff_spec().sel == (24, 24)
    assert cfg.cost_model().alpha_net == pytest.approx(0.49)
    assert cfg.rank_topology().nranks == 8


def test_node_grid_from_topology():
    cfg = config_from_dict({"system": FCC, "topology": {"rank_grid": [8, 12, 16], "node_layout": [2, 2, 2]}})
    assert cfg.rank_topology().node_grid == (4, 6, 8)


@pytest.mark.parametrize(
    "overrides, path",
    [
        ({"potential": {"rc": 3.0, "rcs": 3.0}}, "potential.rcs"),
        ({"potential": {"embed_widths": [4, 4], "m2": 5}}, "potential.m2"),
        ({"topology": {"rank_grid": [3, 2, 2], "node_layout": [2, 2, 1]}}, "topology.rank_grid"),
        ({"run": {"steps": -1}}, "run.steps"),
        ({"run": {"scheme": "ring"}}, "run.scheme"),
        ({"run": {"leaders": 3}}, "run.leaders"),
        ({"run": {"dt": 0.0}}, "run.dt"),
        ({"colour": "blue"}, "colour"),
    ],
)
def test_constraint_errors_name_the_path(overrides, path):
    data = {"system": FCC, **overrides}
    err = _error(data)
    assert err.path == path
    assert err.code == ErrorCodes.CONFIG_CONSTRAINT
    assert str(err).startswith(f"{path}: ")


def test_missing_system_section():
    assert _error({}).path == "system"


def test_unknown_nested_key():
    assert _error({"system": {"lattice": {"kind": "fcc", "size": 3}}}).path == "system.lattice.size"


def test_structure_and_lattice_are_exclusive():
    assert _error({"system": {"structure": "a.xyz", **FCC}}).path == "system"


def test_species_errors():
    lattice = {"kind": "random", "natoms": 4, "box": [5.0, 5.0, 5.0]}
    assert _error({"system": {"lattice": lattice, "species": ["A", "A"]}}).path == "system.species"
    assert _error({"system": {"lattice": lattice, "species": ["Ar"]}}).path == "potential.sel"
    no_mass = {"system": {"lattice": lattice, "species": ["Ar"]}, "potential": {"sel": {"Ar": 10}}}
    assert _error(no_mass).path == "system.masses"


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        parse_config(tmp_path / "absent.json")
    assert excinfo.value.code == ErrorCodes.CONFIG_MISSING


@pytest.mark.parametrize("text", ['{"system": ', "[1, 2]"])
def test_parse_config_malformed(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        parse_config(path)
    assert excinfo.value.code == ErrorCodes.CONFIG_MALFORMED


@pytest.mark.parametrize("name", ["copper.json", "water.json"])
def test_shipped_configs_parse(name):
    cfg = parse_config(CONFIG_DIR / name)
    assert cfg.rank_topology().nranks == 8
    assert cfg.cutoff_spec().rcs == 0.5


def test_build_random_structure(small_config):
    structure = config_from_dict(small_config).build_structure()
    assert structure.natoms == 40
    assert structure.species == ("A", "B")


def test_random_lattice_needs_box():
    cfg = config_from_dict(
        {"system": {"lattice": {"kind": "random", "natoms": 4}, "species": ["Cu"]}}
    )
    with pytest.raises(ConfigError) as excinfo:
        cfg.build_structure()
    assert excinfo.value.path == "system.lattice.box"


def test_build_structure_from_relative_file(tmp_path):
    write_xyz(fcc_lattice((1, 1, 2)), tmp_path / "cu.xyz")
    cfg = config_from_dict({"system": {"structure": "cu.xyz"}})
    structure = cfg.build_structure(tmp_path)
    assert structure.natoms == 8
    assert structure.species == ("Cu",)


def test_build_fresh_params(small_config):
    small_config["potential"]["precision"] = "mix-fp32"
    params = config_from_dict(small_config).build_params()
    assert params.ntypes == 2
    assert params.m1 == 8
    assert params.precision is PrecisionMode.MIX_FP32


def test_param_file_type_count_must_match(tmp_path, small_config):
    save_params(init_params(0, 1, embed_widths=(4, 8, 8), fit_widths=(16,), m2=4), tmp_path / "one.txt")
    small_config["potential"]["params"] = "one.txt"
    cfg = config_from_dict(small_config)
    with pytest.raises(ConfigError) as excinfo:
        cfg.build_params(tmp_path)
    assert excinfo.value.path == "potential.params"
