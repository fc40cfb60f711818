import numpy as np
import pytest

from nodemd.errors import DimensionError
from nodemd.tsgemm import (
    PrecisionMode,
    gemm_fp16,
    gemm_nn,
    gemm_reference,
    prepack_transpose,
    quantize_fp16,
)


def test_gemm_identity():
    np.testing.assert_array_equal(gemm_nn(np.array([[1.0, 2.0]]), np.eye(2)), [[1.0, 2.0]])


def test_gemm_small_product():
    """[[1,2]] x [[3,4],[5,6]] = [[13,16]]."""
    C = gemm_nn(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(C, [[13.0, 16.0]])


def test_gemm_accumulates_into_output():
    out = np.ones((1, 2))
    result = gemm_nn(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]]), out=out)
    assert result is out
    np.testing.assert_array_equal(out, [[14.0, 17.0]])


@pytest.mark.parametrize("m", [1, 2, 3, 4, 17])
def test_gemm_matches_oracle_at_fitting_width(m):
    """Both paths agree with the naive loop within 8 ulps at width 240."""
    rng = np.random.default_rng(m)
    A = rng.standard_normal((m, 240))
    B = rng.standard_normal((240, 240))
    C = gemm_nn(A, B)
    ref = gemm_reference(A, B)
    scale = np.abs(A) @ np.abs(B)
    assert (np.abs(C - ref) <= 8 * np.spacing(scale)).all()


def test_gemm_rows_independent_of_batching():
    """A row computed alone equals the same row computed in a batch."""
    rng = np.random.default_rng(7)
    A = rng.standard_normal((9, 32))
    B = rng.standard_normal((32, 5))
    batched = gemm_nn(A, B)
    for i in range(9):
        np.testing.assert_array_equal(gemm_nn(A[i : i + 1], B)[0], batched[i])


def test_gemm_shape_mismatch():
    with pytest.raises(DimensionError):
        gemm_nn(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        gemm_nn(np.ones((2, 3)), np.ones((3, 4)), out=np.zeros((2, 3)))


def test_prepack_transpose():
    np.testing.assert_array_equal(prepack_transpose(np.array([[1, 2], [3, 4]])), [[1, 3], [2, 4]])
    sym = np.array([[2.0, 1.0], [1.0, 5.0]])
    np.testing.assert_array_equal(prepack_transpose(sym), sym)
    assert prepack_transpose(np.ones((3, 5))).flags["C_CONTIGUOUS"]


def test_prepacked_nt_product_matches_direct():
    """G @ W^T through the packed copy equals the NT product."""
    rng = np.random.default_rng(1)
    G = rng.standard_normal((6, 16))
    W = rng.standard_normal((8, 16))
    np.testing.assert_allclose(gemm_nn(G, prepack_transpose(W)), G @ W.T, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize(
    "x, expected",
    [(1.0, 1.0), (0.1, 0.0999755859375), (70000.0, 65504.0), (-70000.0, -65504.0)],
)
def test_quantize_fp16(x, expected):
    assert quantize_fp16(x) == expected


def test_quantize_fp16_keeps_array_dtype():
    q = quantize_fp16(np.array([0.1, 1.0], dtype=np.float32))
    assert q.dtype == np.float32


def test_gemm_fp16_exact_for_representable_operands():
    B = np.array([[0.5, 1.25], [2.0, -3.0]])
    np.testing.assert_array_equal(gemm_fp16(np.eye(2), B), B)


def test_gemm_fp16_rounds_operands():
    """0.1 * 0.1 uses the quantized operands."""
    C = gemm_fp16(np.array([[0.1]]), np.array([[0.1]]))
    q = np.float32(0.0999755859375)
    assert C[0, 0] == pytest.approx(float(q * q), rel=1e-7)
    assert C[0, 0] == pytest.approx(0.009995117, rel=1e-6)


def test_gemm_fp16_uses_quantized_operands():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 7)) * 100.0
    B = rng.normal(size=(7, 5))
    A[0, 0] = 1.0e6
    expected = gemm_nn(quantize_fp16(A).astype(np.float32), quantize_fp16(B).astype(np.float32))
    np.testing.assert_array_equal(gemm_fp16(A, B), expected.astype(np.float64))
    assert quantize_fp16(A)[0, 0] == 65504.0


def test_precision_mode_dtypes():
    assert PrecisionMode.DOUBLE.net_dtype == np.float64
    assert PrecisionMode("mix-fp32").net_dtype == np.float32
    assert PrecisionMode.MIX_FP16.net_dtype == np.float32
