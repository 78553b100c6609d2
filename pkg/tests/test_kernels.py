import numpy as np
import pytest

from itasim.ita import ActMode, ExpParams, GeluParams, i_gelu, ita_gemm, softmax_rows
from itasim.kernels import (ShapeError, add_residual, cluster_gelu, cluster_gemm, cluster_relu,
                            cluster_requant, cluster_softmax, elementwise_affine, gemm_acc,
                            head_accumulate)
from itasim.quant import AccumulatorOverflow, QTensor, QuantError, QuantParams, requantize


def test_cluster_gemm_matches_accelerator_on_aligned_shapes(rng):
    x = rng.integers(-128, 128, size=(128, 192))
    w = rng.integers(-128, 128, size=(192, 64))
    b = rng.integers(-5000, 5000, size=64)
    p = QuantParams.from_real(2e-4)
    for act in (ActMode(), ActMode("relu"), ActMode("gelu", GeluParams.from_scales(2e-3, 0.04))):
        a = cluster_gemm(QTensor(x), QTensor(w), b, p, act).data
        c = ita_gemm(QTensor(x), QTensor(w), b, act, p).data
        assert np.array_equal(a, c)


def test_cluster_gemm_any_shape(rng):
    x = rng.integers(-128, 128, size=(5, 7))
    w = rng.integers(-128, 128, size=(7, 3))
    out = cluster_gemm(QTensor(x, 0.5), QTensor(w, 0.25), None, QuantParams(1, 4))
    assert np.array_equal(out.data, requantize(x @ w, QuantParams(1, 4)))
    assert out.scale == pytest.approx(0.5 * 0.25 * 16)
    with pytest.raises(ShapeError):
        gemm_acc(x, w.T)
    with pytest.raises(ShapeError):
        gemm_acc(x, w, bias=np.zeros(4))


def test_head_accumulate():
    parts = [QTensor(np.full((2, 2), v), 0.1) for v in (100, 100, -50)]
    out = head_accumulate(parts, QuantParams(1, 1))
    assert (out.data == 75).all() and out.scale == pytest.approx(0.2)
    with pytest.raises(QuantError):
        head_accumulate([QTensor(np.ones((2, 2)), 0.1), QTensor(np.ones((2, 2)), 0.2)], QuantParams())
    with pytest.raises(ShapeError):
        head_accumulate([], QuantParams())


def test_affine_add_requant():
    x = QTensor(np.array([[10, -20, 30]]), 1 / 32)
    out = elementwise_affine(x, np.array([2, 3, 4]), np.array([1, 1, -1]), QuantParams(1, 0))
    assert out.data.tolist() == [[21, -59, 119]]
    with pytest.raises(ShapeError):
        elementwise_affine(x, np.array([1, 2]), np.array([1, 2]), QuantParams())
    a = QTensor(np.array([[100, -100]]), 0.5)
    b = QTensor(np.array([[50, 50]]), 0.25)
    s = add_residual(a, b, QuantParams(1, 1), mul_a=2, mul_b=1)   # align b to a's LSB
    assert s.data.tolist() == [[125, -75]]
    with pytest.raises(AccumulatorOverflow):
        add_residual(a, b, QuantParams(), mul_a=1 << 30)
    assert cluster_requant(a, QuantParams(1, 2)).data.tolist() == [[25, -25]]
    assert cluster_relu(a).data.tolist() == [[100, 0]]


def test_softmax_and_gelu_share_the_accelerator_algorithms(rng):
    x = rng.integers(-128, 128, size=(4, 96))
    e = ExpParams.from_input_scale(0.05)
    assert np.array_equal(cluster_softmax(QTensor(x, 0.05), e).data, softmax_rows(x, e))
    assert cluster_softmax(QTensor(x, 0.05), e).scale == pytest.approx(1 / 255)
    gp = GeluParams.from_scales(1 / 32, 0.05)
    assert np.array_equal(cluster_gelu(QTensor(x, 1 / 32), gp).data, i_gelu(x, gp))
