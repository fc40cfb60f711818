"""
Initial structures and extended-XYZ I/O.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .geometry import SimBox


logger = logging.getLogger(__name__)

CU_LATTICE = 3.615
OH_BOND = 0.9572
HOH_ANGLE = 104.52
WATER_SPACING = 3.104

MASSES = {"H": 1.008, "O": 15.999, "Cu": 63.546}

_FCC_BASIS = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
_LATTICE_RE = re.compile(r'Lattice="([^"]*)"')


@dataclass
class Structure:
    """Atoms in an orthogonal periodic box; ``types`` index into ``species``."""

    positions: np.ndarray
    types: np.ndarray
    species: Tuple[str, ...]
    box: SimBox
    velocities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.types = np.asarray(self.types, dtype=int)
        self.species = tuple(self.species)
        if len(self.types) != len(self.positions):
            raise InvalidInputError(
                f"{len(self.positions)} positions but {len(self.types)} types"
            )
        if len(self.types) and (self.types.min() < 0 or self.types.max() >= len(self.species)):
            raise InvalidInputError(f"Atom types must index species {self.species}")
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
            if len(self.velocities) != len(self.positions):
                raise InvalidInputError("Velocity count does not match atom count")

    @property
    def natoms(self) -> int:
        return len(self.positions)

    def masses(self, table: Optional[dict] = None) -> np.ndarray:
        """Per-type masses in amu."""
        table = table or MASSES
        try:
            return np.array([table[s] for s in self.species], dtype=np.float64)
        except KeyError as e:
            raise InvalidInputError(f"No mass for species {e}") from None


def fcc_lattice(cells: Sequence[int], a: float = CU_LATTICE, species: str = "Cu") -> Structure:
    """Face-centred cubic crystal of ``cells`` unit cells (4 atoms each)."""
    cells = np.asarray(cells, dtype=int)
    if cells.shape != (3,) or (cells < 1).any():
        raise InvalidInputError(f"Need three positive cell counts, got {cells.tolist()}")
    grid = np.stack(
        np.meshgrid(*[np.arange(n) for n in cells], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    positions = ((grid[:, None, :] + _FCC_BASIS[None, :, :]) * a).reshape(-1, 3)
    return Structure(
        positions=positions,
        types=np.zeros(len(positions), dtype=int),
        species=(species,),
        box=SimBox(tuple(float(v) for v in cells * a)),
    )


def water_lattice(cells: Sequence[int], spacing: float = WATER_SPACING, seed: int = 0) -> Structure:
    """Water molecules on a simple cubic grid with randomly oriented H-O-H geometry.

    Types: 0 = O, 1 = H.
    """
    cells = np.asarray(cells, dtype=int)
    if cells.shape != (3,) or (cells < 1).any():
        raise InvalidInputError(f"Need three positive cell counts, got {cells.tolist()}")
    rng = np.random.default_rng(seed)
    grid = np.stack(
        np.meshgrid(*[np.arange(n) for n in cells], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    oxygens = (grid + 0.5) * spacing
    half = np.deg2rad(HOH_ANGLE) / 2.0
    positions, types = [], []
    for o in oxygens:
        # random orthonormal frame for the molecule plane
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        e1, e2 = q[:, 0], q[:, 1]
        h1 = o + OH_BOND * (np.cos(half) * e1 + np.sin(half) * e2)
        h2 = o + OH_BOND * (np.cos(half) * e1 - np.sin(half) * e2)
        positions.extend([o, h1, h2])
        types.extend([0, 1, 1])
    box = SimBox(tuple(float(v) for v in cells * spacing))
    return Structure(
        positions=box.wrap(np.array(positions)), types=np.array(types), species=("O", "H"), box=box
    )


def random_cluster(
    natoms: int,
    box: SimBox,
    ntypes: int = 1,
    seed: int = 0,
    min_distance: float = 0.0,
    species: Optional[Sequence[str]] = None,
) -> Structure:
    """Atoms on a jittered simple cubic grid filling the box.

    The jitter keeps nearest-neighbor distances at least ``min_distance`` when
    the grid spacing allows it.
    """
    if natoms < 0:
        raise InvalidInputError(f"natoms must be >= 0, got {natoms}")
    rng = np.random.default_rng(seed)
    lengths = box.array
    species = tuple(species) if species is not None else tuple(f"X{t}" for t in range(ntypes))
    if natoms == 0:
        return Structure(np.empty((0, 3)), np.empty(0, dtype=int), species, box)
    per_side = int(np.ceil(natoms ** (1.0 / 3.0)))
    grid = np.stack(
        np.meshgrid(*[np.arange(per_side)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    grid = grid[rng.permutation(len(grid))[:natoms]]
    spacing = lengths / per_side
    jitter = max(0.0, (spacing.min() - min_distance) / 2.0) if min_distance else spacing.min() * 0.25
    positions = (grid + 0.5) * spacing + rng.uniform(-jitter, jitter, size=(natoms, 3))
    types = rng.integers(0, ntypes, size=natoms)
    return Structure(box.wrap(positions), types, species, box)


def uniform_cloud(natoms: int, box: SimBox, ntypes: int = 1, seed: int = 0) -> Structure:
    """Uniform random positions (no exclusion); for ghost and RDF statistics."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(natoms, 3)) * box.array
    types = rng.integers(0, ntypes, size=natoms)
    return Structure(box.wrap(positions), types, tuple(f"X{t}" for t in range(ntypes)), box)


# --------------------------------------------------------------------------
# Extended XYZ
# --------------------------------------------------------------------------


def _format_frame(structure: Structure, comment_extra: str = "") -> str:
    lx, ly, lz = structure.box.lengths
    has_vel = structure.velocities is not None
    props = "species:S:1:pos:R:3" + (":vel:R:3" if has_vel else "")
    comment = f'Lattice="{lx!r} 0.0 0.0 0.0 {ly!r} 0.0 0.0 0.0 {lz!r}" Properties={props}'
    if comment_extra:
        comment += " " + comment_extra
    lines = [str(structure.natoms), comment]
    for i in range(structure.natoms):
        fields = [structure.species[structure.types[i]]]
        fields += [repr(float(v)) for v in structure.positions[i]]
        if has_vel:
            fields += [repr(float(v)) for v in structure.velocities[i]]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def write_xyz(structure: Structure, path: Union[str, Path], append: bool = False, comment: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        f.write(_format_frame(structure, comment))
    return path


def _parse_box(comment: str, path: Path, lineno: int) -> SimBox:
    m = _LATTICE_RE.search(comment)
    try:
        if m:
            values = [float(v) for v in m.group(1).split()]
        else:
            values = [float(v) for v in comment.split()[:3]]
    except ValueError:
        values = []
    if m and len(values) == 9:
        cell = np.array(values).reshape(3, 3)
        if np.count_nonzero(cell - np.diag(np.diag(cell))):
            raise InvalidInputError(f"{path}:{lineno}: only orthogonal cells are supported")
        return SimBox(tuple(np.diag(cell)))
    if not m and len(values) == 3:
        return SimBox(tuple(values))
    raise InvalidInputError(f"{path}:{lineno}: comment line carries no box lengths")


def iter_xyz(path: Union[str, Path], species: Optional[Sequence[str]] = None) -> Iterator[Structure]:
    """Yield every frame of an extended-XYZ file.

    Species are mapped to types in first-seen order unless ``species`` is given.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Structure file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    known: List[str] = list(species) if species is not None else []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            natoms = int(lines[pos].split()[0])
        except ValueError:
            raise InvalidInputError(f"{path}:{pos + 1}: expected an atom count") from None
        if pos + 1 >= len(lines):
            raise InvalidInputError(f"{path}:{pos + 2}: missing comment line")
        box = _parse_box(lines[pos + 1], path, pos + 2)
        body = lines[pos + 2 : pos + 2 + natoms]
        if len(body) != natoms:
            raise InvalidInputError(f"{path}: frame at line {pos + 1} is truncated")
        positions = np.empty((natoms, 3))
        velocities = np.empty((natoms, 3))
        has_vel = True
        types = np.empty(natoms, dtype=int)
        for i, line in enumerate(body):
            parts = line.split()
            if len(parts) < 4:
                raise InvalidInputError(f"{path}:{pos + 3 + i}: expected 'element x y z'")
            name = parts[0]
            if name not in known:
                if species is not None:
                    raise InvalidInputError(f"{path}:{pos + 3 + i}: unknown species {name}")
                known.append(name)
            types[i] = known.index(name)
            try:
                positions[i] = [float(v) for v in parts[1:4]]
                if len(parts) >= 7:
                    velocities[i] = [float(v) for v in parts[4:7]]
                else:
                    has_vel = False
            except ValueError:
                raise InvalidInputError(f"{path}:{pos + 3 + i}: non-numeric coordinate") from None
        yield Structure(positions, types, tuple(known), box, velocities if has_vel and natoms else None)
        pos += 2 + natoms


def read_xyz(path: Union[str, Path], species: Optional[Sequence[str]] = None) -> Structure:
    """First frame of an extended-XYZ file."""
    for frame in iter_xyz(path, species):
        logger.info(f"Read {frame.natoms} atoms from {path}, box {frame.box.lengths}")
        return frame
    raise InvalidInputError(f"{path}: no frames")
