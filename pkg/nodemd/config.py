"""
Configuration: JSON document schema, loader and conversion to the runtime
dataclasses.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, ErrorCodes, InvalidInputError, InvalidTopologyError
from .engine import RunConfig
from .geometry import RankTopology, SimBox
from .netsim import CostModel
from .neighbor import CutoffSpec
from .potential import ModelParams, init_params, load_params
from .structures import MASSES, Structure, fcc_lattice, random_cluster, read_xyz, water_lattice
from .tsgemm import PrecisionMode


logger = logging.getLogger(__name__)

# neighbor capacity per neighbor species; water has twice as many H as O neighbors
SEL_DEFAULTS = {"O": 46, "H": 92, "Cu": 512}
RC_DEFAULTS = {"copper": 8.0, "water": 6.0}
DT_DEFAULTS = {"copper": 1.0, "water": 0.5}

Int3 = Tuple[int, int, int]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatticeSection(_Section):
    kind: Literal["fcc", "water", "random"] = Field(default="fcc", description="Built-in structure")
    cells: Int3 = Field(default=(3, 3, 3), description="Unit cells per dimension (fcc, water)")
    lattice_constant: Optional[float] = Field(default=None, gt=0, description="fcc a or water spacing (A)")
    natoms: int = Field(default=64, ge=0, description="Atom count (random)")
    box: Optional[Tuple[float, float, float]] = Field(default=None, description="Box lengths (random)")
    seed: int = Field(default=0, description="Orientation / jitter seed")


class SystemSection(_Section):
    structure: Optional[str] = Field(default=None, description="Extended-XYZ structure file")
    lattice: Optional[LatticeSection] = Field(default=None, description="Built-in lattice spec")
    species: Optional[List[str]] = Field(default=None, description="Type order (names)")
    masses: Dict[str, float] = Field(default_factory=dict, description="Mass overrides (amu)")


class PotentialSection(_Section):
    rc: Optional[float] = Field(default=None, gt=0, description="Cutoff radius (A)")
    rcs: float = Field(default=0.5, gt=0, description="Smoothing onset (A)")
    skin: float = Field(default=2.0, ge=0, description="Neighbor-list skin (A)")
    sel: Optional[Dict[str, int]] = Field(default=None, description="Neighbor capacity per species")
    embed_widths: Tuple[int, ...] = Field(default=(8, 16, 16), min_length=1)
    fit_widths: Tuple[int, ...] = Field(default=(240, 240, 240), min_length=1)
    m2: int = Field(default=4, ge=1)
    precision: PrecisionMode = PrecisionMode.DOUBLE
    seed: int = Field(default=1, description="Seed for a freshly initialized model")
    params: Optional[str] = Field(default=None, description="Parameter file path")


class TopologySection(_Section):
    rank_grid: Int3 = (2, 2, 2)
    node_layout: Int3 = (2, 2, 1)


class CostModelSection(_Section):
    alpha_net: float = Field(default=0.49, ge=0)
    beta_net: float = Field(default=1.0 / 6800.0, ge=0)
    alpha_noc: float = Field(default=0.2, ge=0)
    beta_noc: float = Field(default=1.0e-5, ge=0)
    tni_per_node: int = Field(default=6, ge=1)
    comm_threads_per_leader: int = Field(default=6, ge=1)


class OutputSection(_Section):
    thermo_csv: str = "thermo.csv"
    metrics_csv: str = "metrics.csv"
    trajectory: Optional[str] = None


class RunSection(_Section):
    steps: int = Field(default=100, ge=0)
    dt: Optional[float] = Field(default=None, gt=0, description="Time step (fs)")
    temperature: float = Field(default=300.0, ge=0)
    scheme: Literal["three-stage", "p2p", "node-based"] = "node-based"
    leaders: Literal[1, 2, 4] = 4
    load_balance: bool = True
    rebuild_every: int = Field(default=50, ge=1)
    thermo_every: int = Field(default=10, ge=1)
    dump_every: int = Field(default=0, ge=0)
    seed: int = 0
    output: OutputSection = Field(default_factory=OutputSection)


class NodeMDConfig(_Section):
    """Root of the JSON configuration document."""

    system: SystemSection
    potential: PotentialSection = Field(default_factory=PotentialSection)
    topology: TopologySection = Field(default_factory=TopologySection)
    costmodel: CostModelSection = Field(default_factory=CostModelSection)
    run: RunSection = Field(default_factory=RunSection)

    # -- derived settings --------------------------------------------------

    @property
    def system_kind(self) -> str:
        species = set(self.species)
        if species and species <= {"O", "H"}:
            return "water"
        return "copper"

    @property
    def species(self) -> Tuple[str, ...]:
        if self.system.species:
            return tuple(self.system.species)
        lattice = self.system.lattice
        if lattice is not None and lattice.kind == "water":
            return ("O", "H")
        return ("Cu",)

    @property
    def rc(self) -> float:
        return self.potential.rc if self.potential.rc is not None else RC_DEFAULTS[self.system_kind]

    @property
    def dt(self) -> float:
        return self.run.dt if self.run.dt is not None else DT_DEFAULTS[self.system_kind]

    def sel(self) -> Tuple[int, ...]:
        table = dict(SEL_DEFAULTS)
        table.update(self.potential.sel or {})
        missing = [s for s in self.species if s not in table]
        if missing:
            raise ConfigError(f"no neighbor capacity for species {missing}", path="potential.sel")
        return tuple(int(table[s]) for s in self.species)

    def masses(self) -> Tuple[float, ...]:
        table = dict(MASSES)
        table.update(self.system.masses)
        missing = [s for s in self.species if s not in table]
        if missing:
            raise ConfigError(f"no mass for species {missing}", path="system.masses")
        return tuple(float(table[s]) for s in self.species)

    def cutoff_spec(self) -> CutoffSpec:
        return CutoffSpec(
            rc=self.rc,
            rcs=self.potential.rcs,
            skin=self.potential.skin,
            rebuild_every=self.run.rebuild_every,
            sel=self.sel(),
        )

    def rank_topology(self) -> RankTopology:
        return RankTopology(self.topology.rank_grid, self.topology.node_layout)

    def cost_model(self) -> CostModel:
        return CostModel(**self.costmodel.model_dump())

    def run_config(self) -> RunConfig:
        r = self.run
        return RunConfig(
            steps=r.steps,
            dt=self.dt,
            temperature=r.temperature,
            masses=self.masses(),
            scheme=r.scheme,
            leaders=r.leaders,
            load_balance=r.load_balance,
            rebuild_every=r.rebuild_every,
            thermo_every=r.thermo_every,
            dump_every=r.dump_every,
            trajectory=r.output.trajectory,
            seed=r.seed,
        )

    def build_structure(self, base_dir: Optional[Path] = None) -> Structure:
        sys_cfg = self.system
        if sys_cfg.structure is not None:
            path = Path(sys_cfg.structure)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return read_xyz(path, species=self.species if sys_cfg.species else None)
        lat = sys_cfg.lattice or LatticeSection()
        if lat.kind == "fcc":
            kwargs = {"a": lat.lattice_constant} if lat.lattice_constant else {}
            return fcc_lattice(lat.cells, species=self.species[0], **kwargs)
        if lat.kind == "water":
            kwargs = {"spacing": lat.lattice_constant} if lat.lattice_constant else {}
            return water_lattice(lat.cells, seed=lat.seed, **kwargs)
        if lat.box is None:
            raise ConfigError("random lattice needs a box", path="system.lattice.box")
        return random_cluster(
            lat.natoms,
            SimBox(lat.box),
            ntypes=len(self.species),
            seed=lat.seed,
            species=self.species,
        )

    def build_params(self, base_dir: Optional[Path] = None) -> ModelParams:
        pot = self.potential
        if pot.params is not None:
            path = Path(pot.params)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            params = load_params(path, pot.precision)
            if params.ntypes != len(self.species):
                raise ConfigError(
                    f"model has {params.ntypes} types, system has {len(self.species)}",
                    path="potential.params",
                )
            return params
        return init_params(
            pot.seed,
            len(self.species),
            embed_widths=pot.embed_widths,
            fit_widths=pot.fit_widths,
            m2=pot.m2,
            precision=pot.precision,
        )


def _loc_path(loc) -> str:
    return ".".join(str(part) for part in loc)


def _check_constraints(cfg: NodeMDConfig) -> None:
    """Cross-field rules of the runtime types, reported with their JSON path."""
    if cfg.system.structure is not None and cfg.system.lattice is not None:
        raise ConfigError("give either a structure file or a lattice, not both", path="system")
    if cfg.potential.rcs >= cfg.rc:
        raise ConfigError(f"rcs {cfg.potential.rcs} must be smaller than rc {cfg.rc}", path="potential.rcs")
    if cfg.potential.m2 > cfg.potential.embed_widths[-1]:
        raise ConfigError(
            f"M2 {cfg.potential.m2} exceeds embedding width {cfg.potential.embed_widths[-1]}",
            path="potential.m2",
        )
    try:
        cfg.rank_topology()
    except InvalidTopologyError as e:
        raise ConfigError(str(e), path="topology.rank_grid") from e
    if len(cfg.species) != len(set(cfg.species)):
        raise ConfigError(f"duplicate species {cfg.species}", path="system.species")
    cfg.sel()
    cfg.masses()
    try:
        cfg.run_config()
    except InvalidInputError as e:
        raise ConfigError(str(e), path="run") from e


def config_from_dict(data: dict) -> NodeMDConfig:
    try:
        cfg = NodeMDConfig.model_validate(data)
    except ValidationError as e:
        errors = e.errors()
        first = errors[0]
        message = first["msg"]
        if len(errors) > 1:
            message += " (also: " + "; ".join(
                f"{_loc_path(err['loc'])}: {err['msg']}" for err in errors[1:]
            ) + ")"
        raise ConfigError(message, path=_loc_path(first["loc"]) or None) from None
    _check_constraints(cfg)
    return cfg


def parse_config(path: Union[str, Path]) -> NodeMDConfig:
    """Load and validate a JSON configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", code=ErrorCodes.CONFIG_MISSING)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}",
            code=ErrorCodes.CONFIG_MALFORMED,
        ) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object", code=ErrorCodes.CONFIG_MALFORMED)
    cfg = config_from_dict(data)
    logger.info(f"Loaded config {path}")
    return cfg
