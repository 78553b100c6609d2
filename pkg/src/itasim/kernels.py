"""Functional models of the operators executed on the worker cores.

Cluster kernels accumulate in 32 bits and share requantization, activation and
softmax code with the accelerator model, so a node produces the same values no
matter which engine it is mapped to.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .ita import (A_SCALE, IDENTITY, ActMode, AttentionHeadTask, ExpParams, GeluParams,
                  exact_matmul, i_gelu, out_scale_for, softmax_rows)
from .quant import QTensor, QuantError, QuantParams, check_range, requantize

CLUSTER_ACC_BITS = 32


class ShapeError(ValueError):
    pass


def _i64(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, QTensor) else x, dtype=np.int64)


def gemm_acc(x, w, bias=None, trans_b: bool = False, acc_bits: int = CLUSTER_ACC_BITS) -> np.ndarray:
    a = _i64(x)
    b = _i64(w)
    if trans_b:
        b = b.T
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"GEMM shape mismatch {a.shape} x {b.shape}")
    acc = exact_matmul(a, b)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.int64)
        if bias.shape != (b.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({b.shape[1]},)")
        acc += bias[None, :]
    check_range(acc, acc_bits)
    return acc


def cluster_gemm(x: QTensor, w: QTensor, bias, p: QuantParams, act: ActMode = IDENTITY,
                 trans_b: bool = False) -> QTensor:
    """Reference integer GEMM for arbitrary shapes (32-bit accumulator)."""
    acc = gemm_acc(x, w, bias, trans_b)
    return QTensor(act.apply(acc, p), out_scale_for(x.scale, w.scale, act, p))


def head_accumulate(partials: Sequence[QTensor], p: QuantParams) -> QTensor:
    """Sum per-head partial outputs in 32 bits, then requantize once."""
    if not partials:
        raise ShapeError("head_accumulate needs at least one partial")
    shape, scale = partials[0].shape, partials[0].scale
    for t in partials[1:]:
        if t.shape != shape:
            raise ShapeError(f"partial shape {t.shape} != {shape}")
        if not np.isclose(t.scale, scale, rtol=1e-9):
            raise QuantError(f"partial scale {t.scale} != {scale}")
    acc = np.sum([_i64(t) for t in partials], axis=0)
    check_range(acc, CLUSTER_ACC_BITS)
    return QTensor(requantize(acc, p), scale / p.real_multiplier)


def elementwise_affine(x: QTensor, gamma, beta, p: QuantParams,
                       gamma_scale: float = 1.0) -> QTensor:
    """gamma * x + beta per channel (last axis), in 32 bits, then requantize."""
    g = _i64(gamma)
    b = _i64(beta)
    xd = _i64(x)
    if g.shape != xd.shape[-1:] or b.shape != xd.shape[-1:]:
        raise ShapeError(f"affine params {g.shape}/{b.shape} do not match channels {xd.shape[-1:]}")
    acc = xd * g + b
    check_range(acc, CLUSTER_ACC_BITS)
    return QTensor(requantize(acc, p), x.scale * gamma_scale / p.real_multiplier)


def add_residual(a: QTensor, b: QTensor, p: QuantParams, mul_a: int = 1, mul_b: int = 1) -> QTensor:
    """mul_a * a + mul_b * b in 32 bits, then requantize.

    The integer weights align the two input scales: a.scale / mul_a should
    equal b.scale / mul_b.
    """
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    acc = mul_a * _i64(a) + mul_b * _i64(b)
    check_range(acc, CLUSTER_ACC_BITS)
    return QTensor(requantize(acc, p), a.scale / mul_a / p.real_multiplier)


def cluster_softmax(x: QTensor, exp: Optional[ExpParams] = None) -> QTensor:
    """Row softmax (last axis) with the shared integer algorithm; uint8 output, scale 1/255."""
    exp = exp or ExpParams.from_input_scale(x.scale)
    return QTensor(softmax_rows(x.data, exp), A_SCALE, signed=False)


def cluster_gelu(x: QTensor, params: GeluParams) -> QTensor:
    return QTensor(i_gelu(_i64(x), params), params.out_scale)


def cluster_relu(x: QTensor) -> QTensor:
    return QTensor(np.maximum(_i64(x), 0), x.scale, x.signed)


def cluster_requant(x: QTensor, p: QuantParams) -> QTensor:
    return QTensor(requantize(_i64(x), p), x.scale / p.real_multiplier, p.signed)


def cluster_attention_head(task: AttentionHeadTask) -> QTensor:
    """Whole-tensor single-head attention on the cluster."""
    qp = task.quant
    q = cluster_gemm(task.x, task.wq, task.bq, qp["q"])
    k = cluster_gemm(task.x, task.wk, task.bk, qp["k"])
    v = cluster_gemm(task.x, task.wv, task.bv, qp["v"])
    s = cluster_gemm(q, k, None, qp["s"], trans_b=True)
    a = QTensor(softmax_rows(s.data, task.exp), A_SCALE, signed=False)
    av = cluster_gemm(a, v, None, qp["av"])
    return cluster_gemm(av, task.wo, task.bo, qp["o"])
