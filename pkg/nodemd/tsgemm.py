"""
Dense GEMM with a tall-and-skinny fast path, NT->NN pre-packing and binary16
storage emulation.

Every path accumulates each output element sequentially over k, starting from
the existing value of C. Results do not depend on how many rows are batched
together.
"""

from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import DimensionError


FAST_PATH_MAX_ROWS = 3
ROW_BLOCK = 4096
FP16_MAX = 65504.0


class PrecisionMode(str, Enum):
    """Arithmetic used for the embedding and fitting networks."""

    DOUBLE = "double"
    MIX_FP32 = "mix-fp32"
    MIX_FP16 = "mix-fp16"

    @property
    def net_dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self is PrecisionMode.DOUBLE else np.float32)


def _check_shapes(A: np.ndarray, B: np.ndarray, out: Optional[np.ndarray]) -> None:
    if A.ndim != 2 or B.ndim != 2:
        raise DimensionError(f"GEMM operands must be 2-D, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[0]:
        raise DimensionError(f"Inner dimensions differ: {A.shape} x {B.shape}")
    if out is not None and out.shape != (A.shape[0], B.shape[1]):
        raise DimensionError(
            f"Output shape {out.shape} does not match {(A.shape[0], B.shape[1])}"
        )


def _row_broadcast(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> None:
    # row i of C accumulates A[i, k] * row k of B, k ascending
    for i in range(A.shape[0]):
        row = C[i]
        a = A[i]
        for k in range(A.shape[1]):
            row += a[k] * B[k]


def _blocked(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> None:
    for start in range(0, A.shape[0], ROW_BLOCK):
        block = C[start : start + ROW_BLOCK]
        a = A[start : start + ROW_BLOCK]
        for k in range(A.shape[1]):
            block += a[:, k, None] * B[k]


def gemm_nn(A: np.ndarray, B: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Return ``out + A @ B`` (``out`` defaults to zeros) and write it into ``out``.

    Rows <= 3 take the row-broadcast path; larger problems the row-blocked path.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    _check_shapes(A, B, out)
    if out is None:
        out = np.zeros((A.shape[0], B.shape[1]), dtype=np.result_type(A, B))
    if A.shape[0] <= FAST_PATH_MAX_ROWS:
        _row_broadcast(A, B, out)
    else:
        _blocked(A, B, out)
    return out


def gemm_reference(A: np.ndarray, B: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Naive triple loop in Python floats; the oracle for the fast paths."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_shapes(A, B, out)
    m, kdim = A.shape
    n = B.shape[1]
    C = np.zeros((m, n)) if out is None else np.array(out, dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = float(C[i, j])
            for k in range(kdim):
                acc += float(A[i, k]) * float(B[k, j])
            C[i, j] = acc
    return C


def prepack_transpose(W: np.ndarray) -> np.ndarray:
    """Materialize W^T once so that G @ W^T runs as an NN product."""
    return np.ascontiguousarray(np.asarray(W).T)


def quantize_fp16(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Nearest binary16 value (round-to-nearest-even), saturating at +-65504.

    Arrays keep their dtype; Python scalars come back as float.
    """
    arr = np.asarray(x)
    working = arr.dtype if arr.dtype.kind == "f" else np.dtype(np.float64)
    q = np.clip(arr, -FP16_MAX, FP16_MAX).astype(np.float16).astype(working)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(q)
    return q


def gemm_fp16(A: np.ndarray, B: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    """GEMM on binary16-stored operands with single-precision accumulation."""
    A = np.asarray(A)
    B = np.asarray(B)
    _check_shapes(A, B, out)
    a16 = quantize_fp16(A).astype(np.float32)
    b16 = quantize_fp16(B).astype(np.float32)
    acc = gemm_nn(a16, b16)
    working = np.result_type(A, B) if out is None else out.dtype
    if out is None:
        return acc.astype(working)
    out += acc.astype(working)
    return out
