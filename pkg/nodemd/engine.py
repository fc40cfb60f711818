"""
Velocity-Verlet NVE integration over the decomposed system, thermodynamic
output and radial distribution functions.

Units: eV, Angstrom, fs, amu.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import constants
from scipy.spatial import cKDTree

from .errors import InvalidInputError, NodeMDError, StepError
from .geometry import RankTopology, SimBox
from .netsim import Cluster, CostModel, SimMetrics, build_cluster
from .neighbor import CutoffSpec, build_neighbor_list, needs_rebuild
from .potential import BufferPool, ForceResult, ModelParams, compute_energy_forces
from .schemes import (
    BalanceReport,
    CommPlan,
    Domain,
    Scheme,
    balance_report,
    distribute,
    forward_exchange,
    migrate,
    plan_exchange,
    reverse_force_reduce,
    update_ghosts,
)
from .structures import Structure, write_xyz


logger = logging.getLogger(__name__)

# (eV / Angstrom / amu) -> Angstrom / fs^2
ACC_CONV = constants.e / constants.atomic_mass * 1e-10
# eV / K
KB = constants.k / constants.e


@dataclass
class RunConfig:
    """Integration and scheme settings for one MD run."""

    steps: int = 100
    dt: float = 1.0
    temperature: float = 300.0
    masses: Tuple[float, ...] = (63.546,)
    scheme: str = Scheme.NODE_BASED.value
    leaders: int = 4
    load_balance: bool = True
    rebuild_every: int = 50
    thermo_every: int = 10
    dump_every: int = 0
    trajectory: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise InvalidInputError(f"steps must be >= 0, got {self.steps}")
        if self.temperature < 0:
            raise InvalidInputError(f"temperature must be >= 0, got {self.temperature}")
        self.masses = tuple(float(m) for m in self.masses)
        if not self.masses or any(m <= 0 for m in self.masses):
            raise InvalidInputError(f"masses must be positive, got {self.masses}")
        try:
            self.scheme = Scheme(self.scheme).value
        except ValueError:
            raise InvalidInputError(f"Unknown scheme '{self.scheme}'") from None
        if self.rebuild_every < 1 or self.thermo_every < 1 or self.dump_every < 0:
            raise InvalidInputError("rebuild_every and thermo_every must be >= 1, dump_every >= 0")


@dataclass
class ThermoRecord:
    step: int
    total_energy: float
    potential_energy: float
    kinetic_energy: float
    temperature: float
    comm_time_us: float
    messages: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class RunResult:
    thermo: List[ThermoRecord]
    metrics: SimMetrics
    rebuild_steps: List[int]
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    balance: Optional[BalanceReport] = None


# --------------------------------------------------------------------------
# Integrator pieces
# --------------------------------------------------------------------------


def half_kick(velocities: np.ndarray, forces: np.ndarray, atom_masses: np.ndarray, dt: float) -> np.ndarray:
    """v + F/m * dt/2 with the unit conversion applied."""
    return velocities + (0.5 * dt * ACC_CONV) * forces / atom_masses[:, None]


def drift(positions: np.ndarray, velocities: np.ndarray, dt: float) -> np.ndarray:
    return positions + dt * velocities


def vv_step(
    positions: np.ndarray,
    velocities: np.ndarray,
    forces: np.ndarray,
    atom_masses: np.ndarray,
    dt: float,
    force_fn: Callable[[np.ndarray], np.ndarray],
):
    """One velocity-Verlet step; ``force_fn`` maps positions to forces.

    Returns the new positions, velocities and forces.
    """
    v_half = half_kick(velocities, forces, atom_masses, dt)
    x_new = drift(positions, v_half, dt)
    f_new = force_fn(x_new)
    return x_new, half_kick(v_half, f_new, atom_masses, dt), f_new


def kinetic_energy(velocities: np.ndarray, atom_masses: np.ndarray) -> float:
    """Kinetic energy in eV, summed in array order."""
    v = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
    if not len(v):
        return 0.0
    per_atom = 0.5 * atom_masses * (v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
    return float(np.sum(per_atom) / ACC_CONV)


def temperature(ke: float, natoms: int) -> float:
    return 2.0 * ke / (3.0 * natoms * KB) if natoms else 0.0


def maxwell_boltzmann(atom_masses: np.ndarray, temp: float, seed: int = 0) -> np.ndarray:
    """Seeded Maxwell-Boltzmann velocities with zero net momentum, scaled to ``temp``."""
    n = len(atom_masses)
    if n == 0 or temp == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(KB * temp * ACC_CONV / atom_masses)
    v = rng.normal(size=(n, 3)) * sigma[:, None]
    v -= (atom_masses[:, None] * v).sum(axis=0) / atom_masses.sum()
    current = temperature(kinetic_energy(v, atom_masses), n)
    if current > 0:
        v *= np.sqrt(temp / current)
    return v


def thermo(
    step: int,
    potential_energy: float,
    velocities: np.ndarray,
    atom_masses: np.ndarray,
    comm_time_us: float = 0.0,
    messages: int = 0,
) -> ThermoRecord:
    ke = kinetic_energy(velocities, atom_masses)
    return ThermoRecord(
        step=step,
        total_energy=potential_energy + ke,
        potential_energy=potential_energy,
        kinetic_energy=ke,
        temperature=temperature(ke, len(atom_masses)),
        comm_time_us=comm_time_us,
        messages=messages,
    )


# --------------------------------------------------------------------------
# Decomposed simulation
# --------------------------------------------------------------------------


class Simulation:
    """MD over a virtual cluster: exchange, evaluate, reduce, integrate."""

    def __init__(
        self,
        structure: Structure,
        params: ModelParams,
        cutoff: CutoffSpec,
        topo: RankTopology,
        config: RunConfig,
        cost: Optional[CostModel] = None,
    ):
        if len(config.masses) < params.ntypes:
            raise InvalidInputError(f"{len(config.masses)} masses for {params.ntypes} types")
        self.structure = structure
        self.params = params
        self.cutoff = replace(cutoff, rebuild_every=config.rebuild_every)
        self.topo = topo
        self.config = config
        self.cluster: Cluster = build_cluster(topo, cost)
        self.plan: CommPlan = plan_exchange(
            config.scheme,
            topo,
            structure.box,
            self.cutoff.list_cutoff,
            leaders=config.leaders,
            load_balance=config.load_balance,
        )
        self.type_masses = np.asarray(config.masses, dtype=np.float64)
        self.step = 0
        self.energy = 0.0
        self.rebuild_steps: List[int] = []
        self.nlists: list = []
        self.pool = BufferPool()
        self._setup_messages = 0

        velocities = structure.velocities
        if velocities is None:
            velocities = maxwell_boltzmann(
                self.type_masses[structure.types], config.temperature, config.seed
            )
        self.domain: Domain = distribute(
            structure.positions, velocities, structure.types, structure.box, topo
        )

    # -- per-step pieces ----------------------------------------------------

    def _rebuild(self) -> None:
        if self.rebuild_steps:
            migrate(self.plan, self.cluster, self.domain)
        forward_exchange(self.plan, self.cluster, self.domain)
        self.nlists = [
            build_neighbor_list(store, self.cutoff, centers=store.eval_rows)
            for store in self.domain.stores
        ]
        self.rebuild_steps.append(self.step)
        logger.debug(f"Rebuild at step {self.step}")

    def _compute_forces(self) -> None:
        results: List[ForceResult] = []
        gids, energies = [], []
        for store, nlist in zip(self.domain.stores, self.nlists):
            res = compute_energy_forces(store, nlist, self.params, self.cutoff, pool=self.pool)
            results.append(res)
            gids.append(res.center_gids)
            energies.append(res.atom_energies)
            self.cluster.metrics.rank_atoms[store.rank] += len(nlist.centers)
        reverse_force_reduce(self.plan, self.cluster, self.domain, results)
        gids = np.concatenate(gids)
        energies = np.concatenate(energies)
        self.energy = float(np.sum(energies[np.argsort(gids, kind="stable")]))

    def _kick(self) -> None:
        dt = self.config.dt
        for store in self.domain.stores:
            n = store.nlocal
            store.velocities[:n] = half_kick(
                store.velocities[:n], store.forces, self.type_masses[store.types[:n]], dt
            )

    def _drift(self) -> None:
        dt = self.config.dt
        for store in self.domain.stores:
            n = store.nlocal
            store.positions[:n] = drift(store.positions[:n], store.velocities[:n], dt)

    def setup(self) -> None:
        self._rebuild()
        self._compute_forces()
        self._setup_messages = self.cluster.metrics.messages

    def advance(self) -> None:
        """One velocity-Verlet step including the exchange for the new positions."""
        self._kick()
        self._drift()
        self.step += 1
        if needs_rebuild(self.step, self.cutoff):
            self._rebuild()
        else:
            update_ghosts(self.plan, self.cluster, self.domain)
        self._compute_forces()
        self._kick()

    # -- observers ----------------------------------------------------------

    def snapshot(self):
        """Positions, velocities, types, gids and forces in gid order."""
        return self.domain.gather_locals()

    def thermo(self, comm_time_us: float = 0.0) -> ThermoRecord:
        """Current thermo; messages count the traffic of the steps taken so far."""
        _, vel, types, _, _ = self.snapshot()
        return thermo(
            self.step,
            self.energy,
            vel,
            self.type_masses[types],
            comm_time_us=comm_time_us,
            messages=self.cluster.metrics.messages - self._setup_messages,
        )

    def balance(self) -> BalanceReport:
        return balance_report([len(s.eval_rows) for s in self.domain.stores])

    def _dump(self) -> None:
        pos, vel, types, _, _ = self.snapshot()
        frame = Structure(self.structure.box.wrap(pos), types, self.structure.species, self.structure.box, vel)
        write_xyz(frame, self.config.trajectory, append=self.step > 0, comment=f"step={self.step}")

    def run(self, on_thermo: Optional[Callable[[ThermoRecord], None]] = None) -> RunResult:
        cfg = self.config
        records: List[ThermoRecord] = []
        dumping = cfg.dump_every > 0 and cfg.trajectory
        logger.info(
            f"Run: {self.domain.natoms} atoms, {cfg.steps} steps, dt={cfg.dt} fs, "
            f"scheme={self.plan.scheme.value}, load_balance={self.plan.load_balance}, "
            f"precision={self.params.precision.value}"
        )
        try:
            self.setup()
            rec = self.thermo()
            records.append(rec)
            if on_thermo:
                on_thermo(rec)
            if dumping:
                self._dump()
            for _ in range(cfg.steps):
                last_time = self.cluster.metrics.virtual_time_us
                self.advance()
                if self.step % cfg.thermo_every == 0:
                    rec = self.thermo(self.cluster.metrics.virtual_time_us - last_time)
                    records.append(rec)
                    if on_thermo:
                        on_thermo(rec)
                if dumping and self.step % cfg.dump_every == 0:
                    self._dump()
        except StepError:
            raise
        except (NodeMDError, ValueError, FloatingPointError) as e:
            logger.error(f"Run aborted at step {self.step}: {e}")
            raise StepError(self.step, e) from e

        pos, vel, _, _, forces = self.snapshot()
        logger.info(
            f"Run finished: {len(self.rebuild_steps)} rebuilds, "
            f"{self.cluster.metrics.messages} messages, "
            f"{self.cluster.metrics.virtual_time_us:.1f} us virtual comm time"
        )
        return RunResult(
            thermo=records,
            metrics=self.cluster.metrics,
            rebuild_steps=list(self.rebuild_steps),
            positions=pos,
            velocities=vel,
            forces=forces,
            balance=self.balance(),
        )


def run(
    structure: Structure,
    params: ModelParams,
    cutoff: CutoffSpec,
    topo: RankTopology,
    config: RunConfig,
    cost: Optional[CostModel] = None,
    on_thermo: Optional[Callable[[ThermoRecord], None]] = None,
) -> RunResult:
    return Simulation(structure, params, cutoff, topo, config, cost).run(on_thermo)


def evaluate_global(
    positions: np.ndarray,
    types: np.ndarray,
    box: SimBox,
    params: ModelParams,
    cutoff: CutoffSpec,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Single-domain energy, forces and per-atom energies, all in input (gid) order."""
    topo = RankTopology((1, 1, 1), (1, 1, 1))
    cluster = build_cluster(topo, CostModel())
    plan = plan_exchange(Scheme.P2P, topo, box, cutoff.list_cutoff)
    domain = distribute(positions, None, types, box, topo)
    forward_exchange(plan, cluster, domain)
    store = domain.stores[0]
    nlist = build_neighbor_list(store, cutoff)
    res = compute_energy_forces(store, nlist, params, cutoff)
    reverse_force_reduce(plan, cluster, domain, [res])
    order = np.argsort(store.gids[: store.nlocal], kind="stable")
    energies = np.empty(store.nlocal)
    energies[store.gids[res.centers]] = res.atom_energies
    return res.energy, store.forces[order], energies


@dataclass
class DecomposedEvaluation:
    energy: float
    forces: np.ndarray
    domain: Domain
    plan: CommPlan
    cluster: Cluster
    results: List[ForceResult]


def evaluate_decomposed(
    positions: np.ndarray,
    types: np.ndarray,
    box: SimBox,
    params: ModelParams,
    cutoff: CutoffSpec,
    topo: RankTopology,
    scheme: str,
    leaders: int = 4,
    load_balance: bool = True,
    cost: Optional[CostModel] = None,
) -> DecomposedEvaluation:
    """One exchange, evaluation and reverse reduction; forces in gid order."""
    cluster = build_cluster(topo, cost)
    plan = plan_exchange(scheme, topo, box, cutoff.list_cutoff, leaders=leaders, load_balance=load_balance)
    domain = distribute(positions, None, types, box, topo)
    forward_exchange(plan, cluster, domain)
    results = []
    for store in domain.stores:
        nlist = build_neighbor_list(store, cutoff, centers=store.eval_rows)
        results.append(compute_energy_forces(store, nlist, params, cutoff))
    reverse_force_reduce(plan, cluster, domain, results)
    gids = np.concatenate([r.center_gids for r in results])
    energies = np.concatenate([r.atom_energies for r in results])
    energy = float(np.sum(energies[np.argsort(gids, kind="stable")]))
    _, _, _, _, forces = domain.gather_locals()
    return DecomposedEvaluation(energy, forces, domain, plan, cluster, results)


# --------------------------------------------------------------------------
# Radial distribution function
# --------------------------------------------------------------------------


@dataclass
class RDFResult:
    edges: np.ndarray
    g: np.ndarray

    @property
    def r(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def rows(self) -> List[Tuple[float, float]]:
        return [(float(r), float(g)) for r, g in zip(self.r, self.g)]


def rdf(
    positions: np.ndarray,
    box: SimBox,
    r_max: float,
    bins: int,
    types: Optional[np.ndarray] = None,
    pair: Optional[Tuple[int, int]] = None,
) -> RDFResult:
    """Pair-distance histogram normalized by the ideal-gas shell counts.

    With ``pair=(a, b)`` only pairs of those types are counted.
    """
    if bins < 1:
        raise InvalidInputError(f"bins must be >= 1, got {bins}")
    half = 0.5 * min(box.lengths)
    if not 0 < r_max <= half:
        raise InvalidInputError(f"r_max must be in (0, {half}], got {r_max}")
    edges = np.linspace(0.0, r_max, bins + 1)
    p = box.wrap(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
    n = len(p)
    if pair is not None:
        if types is None:
            raise InvalidInputError("Per-pair RDF needs atom types")
        types = np.asarray(types, dtype=int)
        a, b = pair
        na, nb = int(np.sum(types == a)), int(np.sum(types == b))
        npairs = na * (na - 1) / 2 if a == b else na * nb
    else:
        npairs = n * (n - 1) / 2
    if n < 2 or npairs == 0:
        return RDFResult(edges=edges, g=np.zeros(bins))

    tree = cKDTree(p, boxsize=box.array)
    ij = tree.query_pairs(r_max, output_type="ndarray")
    if pair is not None and len(ij):
        ti, tj = types[ij[:, 0]], types[ij[:, 1]]
        keep = ((ti == a) & (tj == b)) | ((ti == b) & (tj == a))
        ij = ij[keep]
    if len(ij):
        d = p[ij[:, 0]] - p[ij[:, 1]]
        d -= box.array * np.round(d / box.array)
        dist = np.sqrt(np.sum(d * d, axis=1))
    else:
        dist = np.empty(0)
    hist, _ = np.histogram(dist, bins=edges)
    shell = 4.0 / 3.0 * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
    ideal = npairs / box.volume * shell
    return RDFResult(edges=edges, g=hist / ideal)


def rdf_frames(frames: Sequence[Structure], r_max: float, bins: int, pair: Optional[Tuple[int, int]] = None) -> RDFResult:
    """Frame-averaged g(r)."""
    if not frames:
        raise InvalidInputError("No frames")
    results = [rdf(f.positions, f.box, r_max, bins, f.types, pair) for f in frames]
    return RDFResult(edges=results[0].edges, g=np.mean([r.g for r in results], axis=0))
