"""
Deep-Potential style force field: smoothed environment matrix, per-type-pair
embedding nets, a two-factor symmetric descriptor, per-type fitting nets, and
analytic forces from a hand-written reverse pass.

All contractions accumulate in a fixed order so that an atom's energy and force
records depend only on its own neighborhood, never on which other atoms are
evaluated in the same batch.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CapacityExceededError, InvalidInputError, ModelError, ParamFileError
from .neighbor import CutoffSpec, NeighborList
from .tsgemm import PrecisionMode, gemm_fp16, gemm_nn, prepack_transpose


logger = logging.getLogger(__name__)

PARAM_MAGIC = "NODEMD-PARAMS"
PARAM_VERSION = 1


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Fully connected layer ``act(x @ weight + bias)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"
    weight_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.atleast_2d(self.weight)
        self.bias = np.asarray(self.bias).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ModelError(
                f"Bias length {self.bias.shape[0]} does not match weight {self.weight.shape}"
            )
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ModelError("Non-finite network parameter")
        if self.activation not in ("tanh", "linear"):
            raise ModelError(f"Unknown activation: {self.activation}")
        self.weight_t = prepack_transpose(self.weight)

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weight.astype(dtype), self.bias.astype(dtype), self.activation)


class Network:
    """Stack of dense layers with a cached copy per working dtype."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ModelError(
                    f"Layer shapes do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self._casts: Dict[np.dtype, "Network"] = {}

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [layer.weight.shape for layer in self.layers]

    def astype(self, dtype) -> "Network":
        dtype = np.dtype(dtype)
        if self.layers[0].weight.dtype == dtype:
            return self
        if dtype not in self._casts:
            self._casts[dtype] = Network([layer.astype(dtype) for layer in self.layers])
        return self._casts[dtype]

    def forward(self, x: np.ndarray, half_first: bool = False):
        """Return the output and the list of layer activations (input first)."""
        h = x
        acts = [x]
        for idx, layer in enumerate(self.layers):
            z = np.empty((h.shape[0], layer.weight.shape[1]), dtype=layer.weight.dtype)
            z[:] = layer.bias
            if half_first and idx == 0:
                gemm_fp16(h, layer.weight, out=z)
            else:
                gemm_nn(h, layer.weight, out=z)
            h = np.tanh(z) if layer.activation == "tanh" else z
            acts.append(h)
        return h, acts

    def backward(self, acts: List[np.ndarray], dy: np.ndarray, half_first: bool = False):
        """Gradient of ``sum(dy * output)`` with respect to the network input."""
        g = dy
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            if layer.activation == "tanh":
                h = acts[idx + 1]
                g = g * (1 - h * h)
            gin = np.zeros((g.shape[0], layer.weight.shape[0]), dtype=layer.weight.dtype)
            if half_first and idx == 0:
                gemm_fp16(g, layer.weight_t, out=gin)
            else:
                gemm_nn(g, layer.weight_t, out=gin)
            g = gin
        return g


@dataclass
class ModelParams:
    """Embedding nets per ordered type pair and fitting nets per center type."""

    ntypes: int
    m2: int
    embedding: Dict[Tuple[int, int], Network]
    fitting: Dict[int, Network]
    precision: PrecisionMode = PrecisionMode.DOUBLE

    def __post_init__(self):
        self.precision = PrecisionMode(self.precision)
        expected_pairs = {(i, j) for i in range(self.ntypes) for j in range(self.ntypes)}
        if set(self.embedding) != expected_pairs:
            raise ModelError(f"Embedding nets must cover all {self.ntypes}x{self.ntypes} type pairs")
        if set(self.fitting) != set(range(self.ntypes)):
            raise ModelError(f"Fitting nets must cover all {self.ntypes} types")
        m1 = {net.out_dim for net in self.embedding.values()}
        if len(m1) != 1:
            raise ModelError(f"Embedding nets disagree on output width: {sorted(m1)}")
        if any(net.in_dim != 1 for net in self.embedding.values()):
            raise ModelError("Embedding nets take a single scalar input")
        if not 0 < self.m2 <= self.m1:
            raise ModelError(f"Need 0 < M2 <= M1, got M2={self.m2}, M1={self.m1}")
        for t, net in self.fitting.items():
            if net.in_dim != self.m1 * self.m2 or net.out_dim != 1:
                raise ModelError(
                    f"Fitting net {t} maps {net.in_dim}->{net.out_dim}, "
                    f"expected {self.m1 * self.m2}->1"
                )

    @property
    def m1(self) -> int:
        return next(iter(self.embedding.values())).out_dim

    @property
    def descriptor_dim(self) -> int:
        return self.m1 * self.m2

    def with_precision(self, precision: Union[str, PrecisionMode]) -> "ModelParams":
        return replace(self, precision=PrecisionMode(precision))


def _make_network(rng, widths: Sequence[int], final_linear: bool) -> Network:
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in + fan_out), size=(fan_in, fan_out))
        b = rng.normal(0.0, 1.0, size=fan_out)
        last = idx == len(widths) - 2
        layers.append(DenseLayer(w, b, "linear" if (last and final_linear) else "tanh"))
    return Network(layers)


def init_params(
    seed: int,
    ntypes: int,
    embed_widths: Sequence[int] = (8, 16, 16),
    fit_widths: Sequence[int] = (240, 240, 240),
    m2: int = 4,
    precision: Union[str, PrecisionMode] = PrecisionMode.DOUBLE,
    energy_shift: Optional[Sequence[float]] = None,
) -> ModelParams:
    """Deterministic random model; identical seeds give bitwise-identical weights."""
    if ntypes < 1:
        raise ModelError(f"ntypes must be >= 1, got {ntypes}")
    rng = np.random.default_rng(seed)
    m1 = int(embed_widths[-1])
    embedding = {
        (i, j): _make_network(rng, [1, *embed_widths], final_linear=False)
        for i in range(ntypes)
        for j in range(ntypes)
    }
    shifts = energy_shift if energy_shift is not None else [-(1.0 + 0.5 * t) for t in range(ntypes)]
    fitting = {}
    for t in range(ntypes):
        net = _make_network(rng, [m1 * m2, *fit_widths, 1], final_linear=True)
        net.layers[-1].bias[:] = shifts[t]
        fitting[t] = net
    params = ModelParams(ntypes=ntypes, m2=m2, embedding=embedding, fitting=fitting, precision=precision)
    logger.info(
        f"Initialized model: ntypes={ntypes}, embedding {[1, *embed_widths]}, "
        f"fitting {[m1 * m2, *fit_widths, 1]}, M2={m2}, precision={params.precision.value}"
    )
    return params


# --------------------------------------------------------------------------
# Parameter file
# --------------------------------------------------------------------------


def _tensor_blocks(params: ModelParams):
    yield "meta", np.array([[params.ntypes, params.m2]], dtype=np.float64)
    for (i, j) in sorted(params.embedding):
        for l, layer in enumerate(params.embedding[(i, j)].layers):
            yield f"embed.{i}.{j}.w{l}", layer.weight
            yield f"embed.{i}.{j}.b{l}", layer.bias[None, :]
    for t in sorted(params.fitting):
        for l, layer in enumerate(params.fitting[t].layers):
            yield f"fit.{t}.w{l}", layer.weight
            yield f"fit.{t}.b{l}", layer.bias[None, :]


def dump_params(params: ModelParams) -> str:
    """Canonical text form: header line, then ``name rows cols`` blocks of row-major floats."""
    lines = [f"{PARAM_MAGIC} {PARAM_VERSION}"]
    for name, tensor in _tensor_blocks(params):
        t = np.atleast_2d(np.asarray(tensor, dtype=np.float64))
        lines.append(f"{name} {t.shape[0]} {t.shape[1]}")
        for row in t:
            lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _parse_tensors(text: str) -> Dict[str, np.ndarray]:
    lines = text.splitlines()
    if not lines:
        raise ParamFileError("empty file", line=1)
    header = lines[0].split()
    if len(header) != 2 or header[0] != PARAM_MAGIC:
        raise ParamFileError(f"expected '{PARAM_MAGIC} <version>'", line=1)
    if header[1] != str(PARAM_VERSION):
        raise ParamFileError(f"unsupported version {header[1]}", line=1)

    tensors: Dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        lineno = pos + 1
        parts = lines[pos].split()
        pos += 1
        if not parts:
            continue
        if len(parts) != 3:
            raise ParamFileError("expected block header 'name rows cols'", line=lineno)
        name, rows_s, cols_s = parts
        try:
            rows, cols = int(rows_s), int(cols_s)
        except ValueError:
            raise ParamFileError(f"bad shape '{rows_s} {cols_s}'", line=lineno) from None
        if rows <= 0 or cols <= 0:
            raise ParamFileError(f"non-positive shape {rows}x{cols}", line=lineno)
        if name in tensors:
            raise ParamFileError(f"duplicate tensor '{name}'", line=lineno)
        data = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines):
                raise ParamFileError(f"tensor '{name}' truncated", line=pos + 1)
            tokens = lines[pos].split()
            if len(tokens) != cols:
                raise ParamFileError(
                    f"tensor '{name}' row {r} has {len(tokens)} values, expected {cols}",
                    line=pos + 1,
                )
            try:
                data[r] = [float(tok) for tok in tokens]
            except ValueError:
                raise ParamFileError(f"non-numeric value in tensor '{name}'", line=pos + 1) from None
            if not np.isfinite(data[r]).all():
                raise ParamFileError(f"non-finite value in tensor '{name}'", line=pos + 1)
            pos += 1
        tensors[name] = data
    return tensors


def _collect_layers(tensors: Dict[str, np.ndarray], prefix: str, final_linear: bool) -> Network:
    layers = []
    l = 0
    while f"{prefix}.w{l}" in tensors:
        if f"{prefix}.b{l}" not in tensors:
            raise ModelError(f"Missing bias {prefix}.b{l}")
        layers.append((tensors.pop(f"{prefix}.w{l}"), tensors.pop(f"{prefix}.b{l}")))
        l += 1
    if not layers:
        raise ModelError(f"No layers for {prefix}")
    dense = []
    for idx, (w, b) in enumerate(layers):
        if b.shape[0] != 1:
            raise ModelError(f"Bias {prefix}.b{idx} must be a single row")
        last = idx == len(layers) - 1
        dense.append(DenseLayer(w, b[0], "linear" if (last and final_linear) else "tanh"))
    return Network(dense)


def parse_params(text: str, precision: Union[str, PrecisionMode] = PrecisionMode.DOUBLE) -> ModelParams:
    tensors = _parse_tensors(text)
    meta = tensors.pop("meta", None)
    if meta is None or meta.shape != (1, 2):
        raise ModelError("Missing 'meta 1 2' tensor with [ntypes, M2]")
    ntypes, m2 = int(meta[0, 0]), int(meta[0, 1])
    embedding = {
        (i, j): _collect_layers(tensors, f"embed.{i}.{j}", final_linear=False)
        for i in range(ntypes)
        for j in range(ntypes)
    }
    fitting = {t: _collect_layers(tensors, f"fit.{t}", final_linear=True) for t in range(ntypes)}
    if tensors:
        raise ModelError(f"Unexpected tensors: {sorted(tensors)}")
    return ModelParams(ntypes=ntypes, m2=m2, embedding=embedding, fitting=fitting, precision=precision)


def load_params(path: Union[str, Path], precision: Union[str, PrecisionMode] = PrecisionMode.DOUBLE) -> ModelParams:
    """Load a parameter file; transposes are packed as the layers are built."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Parameter file not found: {path}")
    params = parse_params(path.read_text(encoding="utf-8"), precision)
    logger.info(f"Loaded model from {path}: ntypes={params.ntypes}, M1={params.m1}, M2={params.m2}")
    return params


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_params(params), encoding="utf-8")
    logger.info(f"Model saved to {path}")
    return path


# --------------------------------------------------------------------------
# Environment matrix
# --------------------------------------------------------------------------


def switch_fn(r, rcs: float, rc: float):
    """Smoothed inverse distance s(r) and its derivative.

    1/r inside rcs, 1/r * u(x) with the quintic u between rcs and rc, zero beyond.
    Accepts a scalar (returns two floats) or an array.
    """
    arr = np.asarray(r, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise InvalidInputError("switch_fn needs r > 0")
    inv = 1.0 / arr
    x = np.clip((arr - rcs) / (rc - rcs), 0.0, 1.0)
    u = x * x * x * (-6.0 * x * x + 15.0 * x - 10.0) + 1.0
    du_dr = -30.0 * x * x * (x - 1.0) * (x - 1.0) / (rc - rcs)
    s = np.where(arr >= rc, 0.0, np.where(arr <= rcs, inv, u * inv))
    ds = np.where(
        arr >= rc, 0.0, np.where(arr <= rcs, -inv * inv, du_dr * inv - u * inv * inv)
    )
    if np.ndim(r) == 0:
        return float(s), float(ds)
    return s, ds


@dataclass
class EnvMatrix:
    """Environment matrices of a batch of centers in the padded, type-grouped layout.

    ``R[c, j] = s(r) * (1, x/r, y/r, z/r)``; slots of type t start at
    ``sum(sel[:t])``. ``neighbor[c, j]`` is the store index or -1 for padding.
    """

    R: np.ndarray
    s: np.ndarray
    ds: np.ndarray
    d: np.ndarray
    r: np.ndarray
    neighbor: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.neighbor >= 0


class BufferPool:
    """Scratch arrays reused between evaluations, grown on demand."""

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def zeros(self, name: str, shape: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
        size = int(np.prod(shape))
        buf = self._buffers.get(name)
        if buf is None or buf.size < size or buf.dtype != np.dtype(dtype):
            buf = np.empty(max(size, 1), dtype=dtype)
            self._buffers[name] = buf
        view = buf[:size].reshape(shape)
        view.fill(0)
        return view


def build_env_batch(
    atoms,
    nlist: NeighborList,
    cutoff: CutoffSpec,
    rows: Optional[np.ndarray] = None,
    pool: Optional[BufferPool] = None,
) -> EnvMatrix:
    """Environment matrices for the list rows ``rows`` (default: all centers)."""
    if tuple(nlist.sel) != tuple(cutoff.sel):
        raise ModelError(f"Neighbor list sel {nlist.sel} differs from cutoff sel {cutoff.sel}")
    positions = np.asarray(atoms.positions, dtype=np.float64)
    types = np.asarray(atoms.types, dtype=int)
    gids = np.asarray(atoms.gids)
    rows = np.arange(nlist.ncenters) if rows is None else np.asarray(rows, dtype=int)
    nc, nnei, ntypes = len(rows), cutoff.nnei, cutoff.ntypes
    sel = np.asarray(cutoff.sel, dtype=int)
    sel_offsets = np.concatenate(([0], np.cumsum(sel)))

    alloc = pool.zeros if pool is not None else (lambda name, shape, dtype=np.float64: np.zeros(shape, dtype))
    R = alloc("R", (nc, nnei, 4))
    s_all = alloc("s", (nc, nnei))
    ds_all = alloc("ds", (nc, nnei))
    d_all = alloc("d", (nc, nnei, 3))
    r_all = alloc("r", (nc, nnei))
    r_all.fill(1.0)
    neighbor = np.full((nc, nnei), -1, dtype=int)

    counts = nlist.counts()[rows]
    if counts.sum() == 0:
        return EnvMatrix(R, s_all, ds_all, d_all, r_all, neighbor)
    entries = np.concatenate([np.arange(nlist.offsets[c], nlist.offsets[c + 1]) for c in rows])
    owner = np.repeat(np.arange(nc), counts)
    nb = nlist.indices[entries]
    ctr = nlist.centers[rows][owner]
    d = positions[nb] - positions[ctr]
    r = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    inside = r < cutoff.rc
    nb, owner, d, r = nb[inside], owner[inside], d[inside], r[inside]
    if len(nb) == 0:
        return EnvMatrix(R, s_all, ds_all, d_all, r_all, neighbor)
    t = types[nb]
    group = owner * ntypes + t
    uniq, first, inverse, group_counts = np.unique(
        group, return_index=True, return_inverse=True, return_counts=True
    )
    over = group_counts > sel[uniq % ntypes]
    if over.any():
        g = uniq[np.argmax(over)]
        center = nlist.centers[rows][g // ntypes]
        raise CapacityExceededError(
            int(gids[center]), int(g % ntypes), int(group_counts[np.argmax(over)]), int(sel[g % ntypes])
        )
    slot = sel_offsets[t] + (np.arange(len(nb)) - first[inverse])
    s, ds = switch_fn(r, cutoff.rcs, cutoff.rc)
    R[owner, slot, 0] = s
    R[owner, slot, 1] = s * d[:, 0] / r
    R[owner, slot, 2] = s * d[:, 1] / r
    R[owner, slot, 3] = s * d[:, 2] / r
    s_all[owner, slot] = s
    ds_all[owner, slot] = ds
    d_all[owner, slot] = d
    r_all[owner, slot] = r
    neighbor[owner, slot] = nb
    return EnvMatrix(R, s_all, ds_all, d_all, r_all, neighbor)


def build_env_matrix(i: int, nlist: NeighborList, atoms, cutoff: CutoffSpec) -> EnvMatrix:
    """Environment matrix of the center at list row ``i``."""
    env = build_env_batch(atoms, nlist, cutoff, rows=np.array([i]))
    return EnvMatrix(*(np.array(a[0]) for a in (env.R, env.s, env.ds, env.d, env.r, env.neighbor)))


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------


def embedding_forward(s_column: np.ndarray, params: ModelParams, ti: int, tj: int):
    """Embedding rows g_j = MLP(s_j) for one neighbor type group; returns (G, activations)."""
    net = params.embedding[(ti, tj)].astype(params.precision.net_dtype)
    x = np.asarray(s_column, dtype=params.precision.net_dtype).reshape(-1, 1)
    return net.forward(x)


def _contract_env(G: np.ndarray, R: np.ndarray) -> np.ndarray:
    # A[c] = G[c]^T R[c], neighbor slots accumulated in ascending order
    A = np.zeros((G.shape[0], G.shape[2], 4))
    for j in range(G.shape[1]):
        A += G[:, j, :, None] * R[:, j, None, :]
    return A


def _descriptor_from_A(A: np.ndarray, m2: int, nnei: int) -> np.ndarray:
    A2 = A[:, :m2, :]
    D = np.zeros((A.shape[0], A.shape[1], m2))
    for c in range(4):
        D += A[:, :, None, c] * A2[:, None, :, c]
    return D / float(nnei * nnei)


def descriptor(R: np.ndarray, G: np.ndarray, m2: int) -> np.ndarray:
    """D = (G^T R)(R^T G_2) / N^2 flattened; accepts one atom (2-D) or a batch (3-D)."""
    single = np.ndim(R) == 2
    R3 = np.asarray(R, dtype=np.float64)[None] if single else np.asarray(R, dtype=np.float64)
    G3 = np.asarray(G, dtype=np.float64)[None] if single else np.asarray(G, dtype=np.float64)
    D = _descriptor_from_A(_contract_env(G3, R3), m2, R3.shape[1]).reshape(R3.shape[0], -1)
    return D[0] if single else D


# --------------------------------------------------------------------------
# Energy and forces
# --------------------------------------------------------------------------


@dataclass
class ForceResult:
    """Energies of the evaluated centers and their force records.

    A record is (target store index, center global id, neighbor slot, force);
    slot -1 is the center's reaction on itself. Owners sum records sorted by
    (center gid, slot), so totals are independent of who evaluated what.
    """

    centers: np.ndarray
    center_gids: np.ndarray
    atom_energies: np.ndarray
    self_forces: np.ndarray
    pair_targets: np.ndarray
    pair_gids: np.ndarray
    pair_slots: np.ndarray
    pair_forces: np.ndarray

    @property
    def energy(self) -> float:
        order = np.argsort(self.center_gids, kind="stable")
        return float(np.sum(self.atom_energies[order]))

    def records(self):
        targets = np.concatenate([self.centers, self.pair_targets])
        gids = np.concatenate([self.center_gids, self.pair_gids])
        slots = np.concatenate([np.full(len(self.centers), -1, dtype=int), self.pair_slots])
        forces = np.concatenate([self.self_forces, self.pair_forces])
        return targets, gids, slots, forces

    def store_forces(self, nstore: int) -> np.ndarray:
        """Sum of all records per store entry, in canonical order."""
        return reduce_records(*self.records(), nstore)


def reduce_records(targets, gids, slots, forces, n: int) -> np.ndarray:
    """Per-target sums of force records taken in (center gid, slot) order."""
    out = np.zeros((n, 3))
    if len(targets) == 0:
        return out
    order = np.lexsort((slots, gids, targets))
    t_sorted = targets[order]
    f_sorted = forces[order]
    starts = np.flatnonzero(np.r_[True, t_sorted[1:] != t_sorted[:-1]])
    lengths = np.diff(np.r_[starts, len(t_sorted)])
    owners = t_sorted[starts]
    # k-th record of every target added in step k: sequential per target
    for k in range(int(lengths.max())):
        live = lengths > k
        out[owners[live]] += f_sorted[starts[live] + k]
    return out


def _evaluate_center_type(ti: int, env: EnvMatrix, rows: np.ndarray, params: ModelParams, cutoff: CutoffSpec):
    dtype = params.precision.net_dtype
    half = params.precision is PrecisionMode.MIX_FP16
    m1, m2, nnei = params.m1, params.m2, cutoff.nnei
    sel_offsets = np.concatenate(([0], np.cumsum(cutoff.sel)))
    R = env.R[rows]
    s = env.s[rows]
    n = len(rows)

    G = np.zeros((n, nnei, m1))
    caches = []
    for tj in range(params.ntypes):
        lo, hi = sel_offsets[tj], sel_offsets[tj + 1]
        if hi == lo:
            caches.append(None)
            continue
        y, acts = embedding_forward(s[:, lo:hi], params, ti, tj)
        G[:, lo:hi] = y.reshape(n, hi - lo, m1)
        caches.append(acts)

    A = _contract_env(G, R)
    A2 = A[:, :m2, :]
    norm = 1.0 / float(nnei * nnei)
    D = _descriptor_from_A(A, m2, nnei)

    fit = params.fitting[ti].astype(dtype)
    y, fit_acts = fit.forward(D.reshape(n, -1).astype(dtype), half_first=half)
    energies = y[:, 0].astype(np.float64)

    dD = fit.backward(fit_acts, np.ones((n, 1), dtype=dtype), half_first=half)
    dD = dD.astype(np.float64).reshape(n, m1, m2) * norm
    dA = np.zeros((n, m1, 4))
    for k in range(m2):
        dA += dD[:, :, k, None] * A2[:, None, k, :]
    for m in range(m1):
        dA[:, :m2, :] += dD[:, m, :, None] * A[:, None, m, :]
    dG = np.zeros((n, nnei, m1))
    for c in range(4):
        dG += R[:, :, c, None] * dA[:, None, :, c]
    dR = np.zeros((n, nnei, 4))
    for m in range(m1):
        dR += G[:, :, m, None] * dA[:, None, m, :]

    grad_s = np.zeros((n, nnei))
    for tj in range(params.ntypes):
        lo, hi = sel_offsets[tj], sel_offsets[tj + 1]
        if caches[tj] is None:
            continue
        net = params.embedding[(ti, tj)].astype(dtype)
        gx = net.backward(caches[tj], dG[:, lo:hi].reshape(-1, m1).astype(dtype))
        grad_s[:, lo:hi] = gx.reshape(n, hi - lo).astype(np.float64)

    # chain rule through R_j = s(r) (1, d/r) with d = x_j - x_i
    d = env.d[rows]
    r = env.r[rows]
    sv = env.s[rows]
    dsdr = env.ds[rows]
    u = d / r[..., None]
    dR0 = dR[..., 0] + grad_s
    dRv = dR[..., 1:4]
    proj = dRv[..., 0] * u[..., 0] + dRv[..., 1] * u[..., 1] + dRv[..., 2] * u[..., 2]
    radial = dsdr * (dR0 + proj)
    tangential = sv / r
    g = radial[..., None] * u + tangential[..., None] * (dRv - proj[..., None] * u)
    g[~env.mask[rows]] = 0.0
    return energies, g


def compute_energy_forces(
    atoms,
    nlist: NeighborList,
    params: ModelParams,
    cutoff: CutoffSpec,
    rows: Optional[np.ndarray] = None,
    pool: Optional[BufferPool] = None,
) -> ForceResult:
    """Energies and force records for the list rows ``rows`` (default: all centers)."""
    if cutoff.ntypes != params.ntypes:
        raise ModelError(f"Cutoff lists {cutoff.ntypes} types, model has {params.ntypes}")
    rows = np.arange(nlist.ncenters) if rows is None else np.asarray(rows, dtype=int)
    env = build_env_batch(atoms, nlist, cutoff, rows=rows, pool=pool)
    types = np.asarray(atoms.types, dtype=int)
    gids = np.asarray(atoms.gids, dtype=np.int64)
    centers = nlist.centers[rows]
    nc, nnei = len(rows), cutoff.nnei

    energies = np.zeros(nc)
    g = np.zeros((nc, nnei, 3))
    for ti in range(params.ntypes):
        sub = np.flatnonzero(types[centers] == ti)
        if len(sub) == 0:
            continue
        e_t, g_t = _evaluate_center_type(ti, env, sub, params, cutoff)
        energies[sub] = e_t
        g[sub] = g_t

    self_forces = np.zeros((nc, 3))
    for j in range(nnei):
        self_forces += g[:, j]
    mask = env.mask
    cidx, slots = np.nonzero(mask)
    return ForceResult(
        centers=centers,
        center_gids=gids[centers],
        atom_energies=energies,
        self_forces=self_forces,
        pair_targets=env.neighbor[cidx, slots],
        pair_gids=gids[centers][cidx],
        pair_slots=slots,
        pair_forces=-g[cidx, slots],
    )
