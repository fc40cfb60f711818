"""
Oracle suites behind ``nodemd validate``.

Each suite returns a list of CheckResult; a report fails when any check fails.
Systems are generated from seeds at a density that keeps every type's expected
neighbor count at half of its capacity.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .engine import evaluate_decomposed, evaluate_global
from .errors import ValidationFailure
from .geometry import Int3, RankTopology, SimBox, ghost_count_model
from .netsim import RegistrationPolicy, build_cluster, register_regions
from .neighbor import CutoffSpec
from .potential import DenseLayer, ModelParams, Network
from .schemes import (
    Scheme,
    benchmark_exchange,
    distribute,
    forward_exchange,
    oracle_ghosts,
    plan_exchange,
    rank_loads,
    sdmr,
)
from .structures import Structure, random_cluster, uniform_cloud
from .tsgemm import PrecisionMode, gemm_nn, gemm_reference, prepack_transpose


logger = logging.getLogger(__name__)

BENCH_TOPOLOGY = ((8, 12, 4), (2, 2, 1))
BENCH_FACTORS: Dict[str, Tuple[float, float, float]] = {
    "1x1x1": (1.0, 1.0, 1.0),
    "0.5x0.5x1": (0.5, 0.5, 1.0),
    "0.5x0.5x0.5": (0.5, 0.5, 0.5),
}
EXPECTED_COUNTS = {
    # sub-box spec: (three-stage rounds, p2p peers, node-based node peers)
    "1x1x1": (3, 26, 26),
    "0.5x0.5x1": (5, 74, 26),
    "0.5x0.5x0.5": (6, 124, 44),
}

# (scheme, leaders, load_balance)
SCHEME_VARIANTS = (
    (Scheme.THREE_STAGE, 4, False),
    (Scheme.P2P, 4, False),
    (Scheme.NODE_BASED, 4, True),
    (Scheme.NODE_BASED, 1, True),
    (Scheme.NODE_BASED, 2, False),
)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def extend(self, checks: Sequence[CheckResult]) -> None:
        self.checks.extend(checks)

    def raise_on_failure(self) -> None:
        if not self.passed:
            names = ", ".join(f"{c.suite}/{c.name}" for c in self.failures)
            raise ValidationFailure(f"{len(self.failures)} check(s) failed: {names}")


@dataclass
class SuiteSettings:
    """Sample sizes of the seeded suites. The defaults are the acceptance sizes."""

    seeds: Tuple[int, ...] = tuple(range(20))
    ghost_seeds: Tuple[int, ...] = tuple(range(200))
    gradient_seeds: Tuple[int, ...] = tuple(range(30))
    gradient_atoms: int = 32
    # per-type capacity of the gradient model, filled to a quarter
    gradient_sel: int = 32
    gradient_force_scale: float = 1.0e-3
    fd_atoms: int = 4
    fd_step: float = 1.0e-3
    ghost_topology: Tuple[Int3, Int3] = ((4, 4, 4), (2, 2, 1))
    ghost_atoms_per_rank: int = 12
    gemm_instances: int = 1000

    @classmethod
    def quick(cls) -> "SuiteSettings":
        """A few seeds per suite, for smoke runs."""
        return cls(seeds=(0, 1, 2), ghost_seeds=(0, 1, 2), gradient_seeds=(0, 1), gemm_instances=40)

    def with_seed_count(self, n: int) -> "SuiteSettings":
        seeds = tuple(range(n))
        return replace(self, seeds=seeds, ghost_seeds=seeds, gradient_seeds=seeds)


# --------------------------------------------------------------------------
# System generation
# --------------------------------------------------------------------------


def capacity_density(cutoff: CutoffSpec, fill: float = 0.5) -> float:
    """Atoms per cubic Angstrom at which each type fills ``fill`` of its neighbor capacity."""
    shell = 4.0 / 3.0 * np.pi * cutoff.rc**3
    positive = [s for s in cutoff.sel if s > 0]
    if not positive:
        return 0.0
    return fill * min(positive) * cutoff.ntypes / shell


def random_system(
    natoms: int, cutoff: CutoffSpec, seed: int, min_side: float = 0.0, fill: float = 0.5
) -> Structure:
    """Seeded jittered-grid system sized for ``capacity_density``."""
    side = max((natoms / capacity_density(cutoff, fill)) ** (1.0 / 3.0), min_side)
    return random_cluster(natoms, SimBox((side, side, side)), ntypes=cutoff.ntypes, seed=seed)


def dyadic_system(natoms: int, cutoff: CutoffSpec, seed: int) -> Structure:
    """Like ``random_system`` but with box lengths and coordinates exact in binary."""
    base = random_system(natoms, cutoff, seed, min_side=cutoff.list_cutoff / 3.0)
    side = np.ceil(base.box.lengths[0] * 4.0) / 4.0
    box = SimBox((side, side, side))
    positions = box.wrap(np.round(base.positions * 1024.0) / 1024.0)
    return Structure(positions, base.types, base.species, box)


def _energy_fn(params: ModelParams, cutoff: CutoffSpec, types: np.ndarray, box: SimBox) -> Callable:
    def energy(positions: np.ndarray) -> float:
        return evaluate_global(positions, types, box, params, cutoff)[0]

    return energy


def _relative(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale else 0.0


def _rms_relative(forces: np.ndarray, reference: np.ndarray) -> float:
    ref = float(np.sqrt(np.mean(reference * reference)))
    err = float(np.sqrt(np.mean((forces - reference) ** 2)))
    return err / ref if ref else err


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------


def check_ghost_model() -> List[CheckResult]:
    g = ghost_count_model(1.0, 2.0)
    return [
        CheckResult("ghost-model", "nghost_bs(1,2)", g.nghost_bs == 124.0, g.nghost_bs, 124.0),
        CheckResult("ghost-model", "nghost_lb(1,2)", g.nghost_lb == 179.0, g.nghost_lb, 179.0),
        CheckResult("ghost-model", "ratio", abs(g.ratio - 1.4435) < 5e-4, g.ratio, 1.4435),
    ]


def check_plan_counts(cutoff: float = 1.0) -> List[CheckResult]:
    """Rounds and peer counts of the three schemes on a 4x6x4-node cluster."""
    topo = RankTopology(*BENCH_TOPOLOGY)
    checks = []
    for spec, factors in BENCH_FACTORS.items():
        box = SimBox(tuple(g * f * cutoff for g, f in zip(topo.rank_grid, factors)))
        rounds, p2p, node = EXPECTED_COUNTS[spec]
        got = (
            plan_exchange(Scheme.THREE_STAGE, topo, box, cutoff).round_count,
            plan_exchange(Scheme.P2P, topo, box, cutoff).peer_count,
            plan_exchange(Scheme.NODE_BASED, topo, box, cutoff).peer_count,
        )
        for name, value, expected in zip(("rounds", "p2p peers", "node peers"), got, (rounds, p2p, node)):
            checks.append(CheckResult("plan-counts", f"{spec} {name}", value == expected, value, expected))
    return checks


def check_registration() -> List[CheckResult]:
    topo = RankTopology(*BENCH_TOPOLOGY)
    box = SimBox(tuple(0.5 * g for g in topo.rank_grid))
    plan = plan_exchange(Scheme.P2P, topo, box, 1.0)
    cluster = build_cluster(topo)
    pooled = register_regions(cluster, RegistrationPolicy.POOLED, plan.neighbor_counts())
    per_neighbor = register_regions(cluster, RegistrationPolicy.PER_NEIGHBOR, plan.neighbor_counts())
    return [
        CheckResult("registration", "pooled", bool((pooled == 1).all()), float(pooled.max()), 1.0),
        CheckResult(
            "registration", "per-neighbor", bool((per_neighbor == 248).all()), float(per_neighbor.max()), 248.0
        ),
    ]


def check_ghost_sets(cutoff: float, settings: SuiteSettings) -> List[CheckResult]:
    """Halo of every rank, for every scheme variant, against the brute-force oracle."""
    topo = RankTopology(*settings.ghost_topology)
    side = 0.6 * cutoff
    box = SimBox(tuple(g * side for g in topo.rank_grid))
    natoms = settings.ghost_atoms_per_rank * topo.nranks
    checks = []
    for seed in settings.ghost_seeds:
        cloud = uniform_cloud(natoms, box, seed=seed)
        gids = np.arange(natoms)
        for scheme, leaders, lb in SCHEME_VARIANTS:
            plan = plan_exchange(scheme, topo, box, cutoff, leaders=leaders, load_balance=lb)
            domain = distribute(cloud.positions, None, cloud.types, box, topo)
            forward_exchange(plan, build_cluster(topo), domain)
            bad = []
            for store in domain.stores:
                if plan.load_balance:
                    region = plan.node_boxes[topo.node_of(store.rank)]
                else:
                    region = plan.subboxes[store.rank]
                expected = oracle_ghosts(cloud.positions, gids, region, cutoff, box)
                got = store.ghost_set()
                if got != expected or len(got) != store.size - store.ghost_start:
                    bad.append(store.rank)
            name = f"seed {seed} {scheme.value} leaders={leaders} lb={plan.load_balance}"
            detail = f"mismatching ranks {bad[:8]}" if bad else ""
            checks.append(CheckResult("ghost-sets", name, not bad, float(len(bad)), 0.0, detail))
    return checks


def check_scheme_equivalence(
    params: ModelParams,
    cutoff: CutoffSpec,
    topo: RankTopology,
    settings: SuiteSettings,
    tolerance: float = 1e-12,
) -> List[CheckResult]:
    """Decomposed forces of every scheme against the single-domain evaluation."""
    params = params.with_precision(PrecisionMode.DOUBLE)
    side = 0.6 * cutoff.list_cutoff
    checks = []
    for seed in settings.seeds:
        box = SimBox(tuple(g * side for g in topo.rank_grid))
        natoms = max(2, int(capacity_density(cutoff) * box.volume))
        system = random_cluster(natoms, box, ntypes=cutoff.ntypes, seed=seed)
        e_ref, f_ref, _ = evaluate_global(system.positions, system.types, box, params, cutoff)
        for scheme, leaders, lb in SCHEME_VARIANTS:
            ev = evaluate_decomposed(
                system.positions, system.types, box, params, cutoff, topo, scheme, leaders, lb
            )
            err = float(np.max(np.abs(ev.forces - f_ref))) if natoms else 0.0
            e_err = _relative(ev.energy, e_ref)
            name = f"seed {seed} {scheme.value} leaders={leaders} lb={ev.plan.load_balance}"
            checks.append(
                CheckResult(
                    "scheme-equivalence",
                    name,
                    err <= tolerance and e_err <= tolerance,
                    err,
                    tolerance,
                    f"energy rel diff {e_err:.3e}",
                )
            )
    return checks


def finite_difference_forces(
    energy: Callable[[np.ndarray], float],
    positions: np.ndarray,
    atoms: Sequence[int],
    step: float,
) -> np.ndarray:
    """Fourth-order central-difference -dE/dx for the listed atoms."""
    out = np.zeros((len(atoms), 3))
    for a, i in enumerate(atoms):
        for d in range(3):
            shifted = {}
            for k in (-2, -1, 1, 2):
                moved = positions.copy()
                moved[i, d] += k * step
                shifted[k] = energy(moved)
            slope = (8.0 * (shifted[1] - shifted[-1]) - (shifted[2] - shifted[-2])) / (12.0 * step)
            out[a, d] = -slope
    return out


def amplify_fitting(params: ModelParams, gain: float) -> ModelParams:
    """Copy of ``params`` with the input layer weights of every fitting net scaled by ``gain``."""
    fitting = {}
    for t, net in params.fitting.items():
        first = net.layers[0]
        fitting[t] = Network([DenseLayer(first.weight * gain, first.bias, first.activation), *net.layers[1:]])
    return replace(params, fitting=fitting)


def check_gradients(
    params: ModelParams, cutoff: CutoffSpec, settings: SuiteSettings, tolerance: float = 1e-6
) -> List[CheckResult]:
    """Analytic forces against finite differences of the total energy.

    The 1/N^2 descriptor normalization leaves forces of production models near
    the rounding of E, so each system runs with ``settings.gradient_sel``
    neighbors per type and a fitting input layer amplified until the rms force
    reaches ``settings.gradient_force_scale``.
    """
    params = params.with_precision(PrecisionMode.DOUBLE)
    cutoff = replace(cutoff, sel=(settings.gradient_sel,) * cutoff.ntypes)
    checks = []
    for seed in settings.gradient_seeds:
        system = random_system(
            settings.gradient_atoms, cutoff, seed, min_side=cutoff.list_cutoff / 3.0, fill=0.25
        )
        _, forces, _ = evaluate_global(system.positions, system.types, system.box, params, cutoff)
        rms = float(np.sqrt(np.mean(forces * forces)))
        gain = float(np.clip(settings.gradient_force_scale / rms, 1.0, 1.0e4)) if rms else 1.0
        model = amplify_fitting(params, gain)
        energy = _energy_fn(model, cutoff, system.types, system.box)
        _, forces, _ = evaluate_global(system.positions, system.types, system.box, model, cutoff)
        rng = np.random.default_rng(seed)
        atoms = rng.choice(system.natoms, size=min(settings.fd_atoms, system.natoms), replace=False)
        fd = finite_difference_forces(energy, system.positions, atoms, settings.fd_step)
        analytic = forces[atoms]
        norm = float(np.linalg.norm(analytic))
        err = float(np.linalg.norm(fd - analytic)) / norm if norm else float(np.linalg.norm(fd))
        checks.append(CheckResult("gradients", f"seed {seed}", err < tolerance, err, tolerance))
    return checks


def check_invariances(params: ModelParams, cutoff: CutoffSpec, settings: SuiteSettings) -> List[CheckResult]:
    """Translation (bitwise), rotation and permutation invariance of the energy."""
    params = params.with_precision(PrecisionMode.DOUBLE)
    checks = []
    for seed in settings.seeds:
        rng = np.random.default_rng(seed)

        system = dyadic_system(24, cutoff, seed)
        e0 = evaluate_global(system.positions, system.types, system.box, params, cutoff)[0]
        shift = np.round(rng.uniform(0, 1, size=3) * system.box.array * 64.0) / 64.0
        moved = system.box.wrap(system.positions + shift)
        e1 = evaluate_global(moved, system.types, system.box, params, cutoff)[0]
        checks.append(CheckResult("invariance", f"seed {seed} translation", e0 == e1, abs(e1 - e0), 0.0))

        perm = rng.permutation(system.natoms)
        e2 = evaluate_global(system.positions[perm], system.types[perm], system.box, params, cutoff)[0]
        rel = _relative(e0, e2)
        checks.append(CheckResult("invariance", f"seed {seed} permutation", rel < 1e-12, rel, 1e-12))

        # isolated cluster: no periodic image lies within rc of another atom
        cluster = random_system(24, cutoff, seed)
        extent = float(np.sqrt(3.0) * cluster.box.lengths[0])
        side = extent + cutoff.list_cutoff + 1.0
        big = SimBox((side, side, side))
        centre = 0.5 * big.array
        local = cluster.positions - cluster.positions.mean(axis=0)
        before = local + centre
        after = Rotation.random(None, seed).apply(local) + centre
        e3 = evaluate_global(before, cluster.types, big, params, cutoff)[0]
        e4 = evaluate_global(after, cluster.types, big, params, cutoff)[0]
        rel = _relative(e3, e4)
        checks.append(CheckResult("invariance", f"seed {seed} rotation", rel < 1e-10, rel, 1e-10))
    return checks


def check_mixed_precision(params: ModelParams, cutoff: CutoffSpec, settings: SuiteSettings) -> List[CheckResult]:
    limits = {PrecisionMode.MIX_FP32: 1e-3, PrecisionMode.MIX_FP16: 1e-2}
    checks = []
    for seed in settings.seeds:
        system = random_system(settings.gradient_atoms, cutoff, seed, min_side=cutoff.list_cutoff / 3.0)
        _, f_ref, _ = evaluate_global(
            system.positions, system.types, system.box, params.with_precision(PrecisionMode.DOUBLE), cutoff
        )
        for mode, limit in limits.items():
            _, f, _ = evaluate_global(
                system.positions, system.types, system.box, params.with_precision(mode), cutoff
            )
            err = _rms_relative(f, f_ref)
            checks.append(CheckResult("mixed-precision", f"seed {seed} {mode.value}", err < limit, err, limit))
    return checks


def check_gemm(settings: SuiteSettings, ulps: int = 8) -> List[CheckResult]:
    """Fast, blocked and pre-packed paths against the naive triple loop."""
    rng = np.random.default_rng(2024)
    shapes = [(1, 240, 240), (1, 64, 240), (2, 240, 1), (3, 16, 16)]
    while len(shapes) < settings.gemm_instances:
        shapes.append(tuple(int(v) for v in rng.integers(1, 24, size=3)))
    worst = 0.0
    for m, k, n in shapes:
        A = rng.normal(size=(m, k))
        B = rng.normal(size=(k, n))
        W = rng.normal(size=(n, k))
        C0 = rng.normal(size=(m, n))
        ref = gemm_reference(A, B, out=C0)
        got = gemm_nn(A, B, out=C0.copy())
        worst = max(worst, float(np.max(np.abs(got - ref) / np.spacing(np.abs(ref)))))
        ref_nt = gemm_reference(A, W.T)
        got_nt = gemm_nn(A, prepack_transpose(W))
        worst = max(worst, float(np.max(np.abs(got_nt - ref_nt) / np.spacing(np.abs(ref_nt)))))
    return [CheckResult("gemm", f"{len(shapes)} instances", worst <= ulps, worst, float(ulps))]


def check_load_balance(settings: SuiteSettings) -> List[CheckResult]:
    """Node-box partitioning against per-rank assignment at about 12 atoms per rank.

    Atoms are drawn uniformly inside every node-box with a fixed count per node,
    so the comparison isolates the imbalance inside nodes.
    """
    topo = RankTopology(*settings.ghost_topology)
    checks = []
    per_node = 4 * settings.ghost_atoms_per_rank - 2
    box = SimBox(tuple(float(g) for g in topo.rank_grid))
    plan = plan_exchange(Scheme.NODE_BASED, topo, box, 0.5)
    for seed in settings.seeds:
        rng = np.random.default_rng(seed)
        parts = []
        for nb in plan.node_boxes:
            parts.append(rng.uniform(nb.lo_array, nb.hi_array, size=(per_node, 3)))
        positions = np.concatenate(parts)
        domain = distribute(positions, None, np.zeros(len(positions), dtype=int), box, topo)
        counts = np.array([s.nlocal for s in domain.stores])
        loads = rank_loads(topo, counts, load_balance=True)
        before, after = sdmr(counts), sdmr(loads)
        cap = int(np.ceil(per_node / topo.ranks_per_node))
        checks.append(
            CheckResult(
                "load-balance",
                f"seed {seed} sdmr drop",
                after * 3.0 <= before,
                before / after if after else float("inf"),
                3.0,
                f"sdmr {before:.2f} -> {after:.2f}",
            )
        )
        checks.append(CheckResult("load-balance", f"seed {seed} max load", loads.max() <= cap, float(loads.max()), cap))
    return checks


def check_comm_time(cutoff: float, atoms_per_rank: int = 4, seed: int = 0) -> List[CheckResult]:
    """Node-based virtual exchange time below p2p for both two-layer configurations."""
    topo = RankTopology(*BENCH_TOPOLOGY)
    checks = []
    for spec in ("0.5x0.5x1", "0.5x0.5x0.5"):
        box = SimBox(tuple(g * f * cutoff for g, f in zip(topo.rank_grid, BENCH_FACTORS[spec])))
        cloud = uniform_cloud(atoms_per_rank * topo.nranks, box, seed=seed)
        cluster = build_cluster(topo)
        times = {}
        for scheme in (Scheme.P2P, Scheme.NODE_BASED):
            plan = plan_exchange(scheme, topo, box, cutoff)
            times[scheme] = benchmark_exchange(plan, cluster, cloud.positions, cloud.types).virtual_time_us
        node, p2p = times[Scheme.NODE_BASED], times[Scheme.P2P]
        checks.append(
            CheckResult("comm-time", f"{spec} node-based < p2p", node < p2p, node, p2p, f"{node:.1f} vs {p2p:.1f} us")
        )
    return checks


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------


def run_all(
    params: ModelParams,
    cutoff: CutoffSpec,
    topo: RankTopology,
    settings: Optional[SuiteSettings] = None,
    on_suite: Optional[Callable[[str], None]] = None,
) -> ValidationReport:
    settings = settings or SuiteSettings()
    suites = [
        ("ghost-model", check_ghost_model),
        ("plan-counts", check_plan_counts),
        ("registration", check_registration),
        ("gemm", lambda: check_gemm(settings)),
        ("ghost-sets", lambda: check_ghost_sets(cutoff.list_cutoff, settings)),
        ("load-balance", lambda: check_load_balance(settings)),
        ("comm-time", lambda: check_comm_time(cutoff.list_cutoff)),
        ("scheme-equivalence", lambda: check_scheme_equivalence(params, cutoff, topo, settings)),
        ("gradients", lambda: check_gradients(params, cutoff, settings)),
        ("invariance", lambda: check_invariances(params, cutoff, settings)),
        ("mixed-precision", lambda: check_mixed_precision(params, cutoff, settings)),
    ]
    report = ValidationReport()
    for name, suite in suites:
        if on_suite:
            on_suite(name)
        checks = suite()
        report.extend(checks)
        failed = sum(not c.passed for c in checks)
        logger.info(f"Suite {name}: {len(checks) - failed}/{len(checks)} passed")
    return report
