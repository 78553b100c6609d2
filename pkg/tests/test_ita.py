import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from itasim.ita import (A_SCALE, EXP_LUT, ActMode, AttentionHeadTask, ExpParams, GeluParams,
                        ItaConfig, ItaConfigError, ItaMaxPhaseError, ItaMaxState, OutputTile,
                        exp2_frac, i_gelu, iexp, ita_attention_head, ita_gemm, itamax_absorb,
                        itamax_finalize, itamax_normalize, reciprocal_q, softmax_rows)
from itasim.kernels import cluster_attention_head
from itasim.quant import AccumulatorOverflow, QTensor, QuantError, QuantParams, requantize


def naive_gemm(x, w, bias, p, relu=False):
    acc = np.zeros((x.shape[0], w.shape[1]), dtype=object)
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            acc[i, j] = sum(int(a) * int(b) for a, b in zip(x[i], w[:, j]))
    if bias is not None:
        acc = acc + np.array([int(b) for b in bias], dtype=object)[None, :]
    acc = acc.astype(np.int64)
    if relu:
        acc = np.maximum(acc, 0)
    return requantize(acc, p)


# -- exponential and reciprocal ------------------------------------------------

def test_exp_lut_values():
    assert EXP_LUT[0] == 32768
    assert EXP_LUT[16] == 23170                    # 2^15 / sqrt(2)
    assert EXP_LUT[1] == round(32768 * 2 ** (-1 / 32))
    assert len(EXP_LUT) == 32 and (np.diff(EXP_LUT) < 0).all()


def test_iexp_shift_and_accuracy():
    assert exp2_frac(0) == 32768
    assert exp2_frac(32) == 16384
    assert exp2_frac(64 + 16) == (23170 + 2) >> 2      # round half up
    p = ExpParams.from_input_scale(0.05)
    d = np.arange(0, 256)
    got = iexp(d, p) / 32768
    want = np.exp(-d * 0.05)
    mask = want > 1e-3
    # exponent resolution is 1/32 of an octave: 2^(1/32) - 1 = 2.2 %
    assert np.max(np.abs(got[mask] - want[mask]) / want[mask]) < 0.025
    z = (d * p.mult) >> p.shift
    lut_exact = 2.0 ** (-z / 32)
    # against the quantized exponent the only error is integer rounding
    assert np.max(np.abs(got - lut_exact) * 32768) <= 1.0
    with pytest.raises(ValueError):
        iexp(-1, p)


def test_exp_params():
    p = ExpParams.from_input_scale(0.05)
    assert p.mult == round(0.05 * math.log2(math.e) * 32 * 2 ** 16)
    assert ExpParams.from_dict(p.to_dict()) == p
    with pytest.raises(QuantError):
        ExpParams.from_input_scale(1.0)          # exponent spread beyond the guard bits


@pytest.mark.parametrize("denom", [1 << 15, 3 << 15, 64 << 15, 12345, 1, (1 << 30) + 7])
def test_reciprocal_is_rounded_quotient(denom):
    q = reciprocal_q(denom)
    assert abs(q - 2 ** 40 / denom) <= 0.5


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 1 << 40))
def test_reciprocal_property(denom):
    q = reciprocal_q(denom)
    assert abs(2 * (q * denom - 2 ** 40)) <= denom


# -- ITAMax --------------------------------------------------------------------

def test_softmax_one_hot_and_uniform():
    e = ExpParams.from_input_scale(0.05)
    row = np.array([[127] + [-128] * 63])
    a = softmax_rows(row, e)
    assert a[0, 0] == 255 and a[0, 1:].sum() == 0
    u = softmax_rows(np.zeros((1, 64), dtype=int), e)
    assert (u == 4).all()                        # 255 / 64 rounded


def test_itamax_phases():
    st_ = ItaMaxState(2, ExpParams())
    with pytest.raises(ItaMaxPhaseError):
        itamax_normalize(st_, np.zeros((2, 4)))
    with pytest.raises(ItaMaxPhaseError):
        itamax_finalize(st_)                      # no row absorbed yet
    itamax_absorb(st_, np.zeros((2, 4), dtype=int))
    itamax_finalize(st_)
    with pytest.raises(ItaMaxPhaseError):
        itamax_absorb(st_, np.zeros((2, 4), dtype=int))
    assert (itamax_normalize(st_, np.zeros((2, 4), dtype=int)) == 64).all()


def test_itamax_chunk_invariance_500_rows():
    rng = np.random.default_rng(7)
    for i in range(500):
        n = int(rng.integers(1, 200))
        row = rng.integers(-128, 128, size=n)
        e = ExpParams.from_input_scale(float(rng.uniform(0.005, 0.09)))
        whole = softmax_rows(row[None, :], e)
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(n - 1, int(rng.integers(0, 6))),
                                  replace=False)) if n > 1 else []
        st_ = ItaMaxState(1, e)
        for chunk in np.split(row, cuts):
            itamax_absorb(st_, chunk[None, :])
        itamax_finalize(st_)
        parts = [itamax_normalize(st_, c[None, :]) for c in np.split(row, cuts)]
        assert np.array_equal(np.concatenate(parts, axis=1), whole), i


def test_softmax_vs_float():
    rng = np.random.default_rng(3)
    errs = []
    for _ in range(200):
        s = float(rng.uniform(0.01, 0.08))
        x = np.clip(np.rint(rng.normal(0, 30, size=(1, 128))), -128, 127).astype(int)
        a = softmax_rows(x, ExpParams.from_input_scale(s))[0] / 255
        p = np.exp(x[0] * s - (x[0] * s).max())
        p /= p.sum()
        errs.append(np.mean(np.abs(a - p)))
        top = np.sort(x[0])[-2:]
        if top[1] > top[0]:
            # the unique input maximum keeps the largest weight
            assert a[np.argmax(x[0])] == a.max()
            if (a == a.max()).sum() == 1:
                assert np.argmax(a) == np.argmax(x[0])
    assert np.mean(errs) <= 2 / 255


# -- i-GeLU --------------------------------------------------------------------

@pytest.mark.parametrize("in_scale,out_scale", [(1 / 2048, 0.04), (1 / 256, 0.1), (1 / 4096, 0.0125)])
def test_gelu_sweep_within_two_lsb(in_scale, out_scale):
    p = GeluParams.from_scales(in_scale, out_scale)
    x = np.arange(-int(12 / in_scale), int(12 / in_scale))
    got = i_gelu(x, p).astype(float)
    xr = x * in_scale
    ref = np.clip(np.round(0.5 * xr * (1 + erf(xr / math.sqrt(2))) / out_scale), -128, 127)
    assert np.abs(got - ref).max() <= 2


def test_gelu_params():
    p = GeluParams.from_scales(1 / 1024, 0.05)
    assert GeluParams.from_dict(p.to_dict()) == p
    with pytest.raises(QuantError):
        GeluParams.from_scales(1 / 1024, 1.0)     # output range beyond the internal clamp
    assert i_gelu(0, p) == 0


# -- GEMM ------------------------------------------------------------------------

def test_gemm_matches_naive_oracle_200_cases():
    rng = np.random.default_rng(11)
    for case in range(200):
        R, K, C = (64 * int(rng.integers(1, 3)) for _ in range(3))
        x = rng.integers(-128, 128, size=(R, K))
        w = rng.integers(-128, 128, size=(K, C))
        bias = rng.integers(-(1 << 20), 1 << 20, size=C) if case % 2 else None
        p = QuantParams.from_real(float(rng.uniform(1e-5, 1e-3)))
        relu = case % 3 == 0
        act = ActMode("relu" if relu else "identity")
        got = ita_gemm(QTensor(x), QTensor(w), bias, act, p).data
        # fast exact oracle on most cases, the element-by-element loop on a few
        if case < 3:
            want = naive_gemm(x[:8], w, bias, p, relu)
            assert np.array_equal(got[:8], want)
        acc = x.astype(object) @ w.astype(object)
        if bias is not None:
            acc = acc + bias.astype(object)[None, :]
        acc = acc.astype(np.int64)
        want = requantize(np.maximum(acc, 0) if relu else acc, p)
        assert np.array_equal(got, want), case


def test_gemm_dims_and_overflow():
    with pytest.raises(ItaConfigError):
        ita_gemm(QTensor(np.zeros((64, 65), int)), QTensor(np.zeros((65, 64), int)), None,
                 ActMode(), QuantParams())
    with pytest.raises(ItaConfigError):
        ItaConfig().check_dims(576)
    tile = OutputTile(1, 1, [(1 << 25) - 1])
    with pytest.raises(AccumulatorOverflow):
        tile.accumulate(np.array([[1]]), np.array([[1]]))


def test_trans_b_equivalence(rng):
    x = rng.integers(-128, 128, size=(64, 128))
    w = rng.integers(-128, 128, size=(128, 64))
    p = QuantParams.from_real(1e-4)
    a = ita_gemm(QTensor(x), QTensor(w), None, ActMode(), p).data
    b = ita_gemm(QTensor(x), QTensor(w.T.copy()), None, ActMode(), p, trans_b=True).data
    assert np.array_equal(a, b)


def _task(rng, S=128, E=64, P=64):
    q = lambda *s: QTensor(rng.integers(-64, 64, size=s), 1 / 64)
    b = lambda n: rng.integers(-2000, 2000, size=n)
    quant = {"q": QuantParams.from_real(1 / 200), "k": QuantParams.from_real(1 / 200),
             "v": QuantParams.from_real(1 / 200), "s": QuantParams.from_real(1 / 600),
             "av": QuantParams.from_real(1 / 8), "o": QuantParams.from_real(1 / 120)}
    x = QTensor(np.clip(np.rint(rng.normal(0, 32, size=(S, E))), -128, 127).astype(int), 1 / 32)
    return AttentionHeadTask(x, q(E, P), q(E, P), q(E, P), q(P, E), b(P), b(P), b(P), b(E), quant,
                             ExpParams.from_input_scale(0.05))


def test_attention_head_matches_cluster(rng):
    for _ in range(3):
        task = _task(rng)
        inter = {}
        out = ita_attention_head(task, intermediates=inter)
        assert np.array_equal(out.data, cluster_attention_head(task).data)
        a = inter["a"].astype(int)
        assert (np.abs(a.sum(axis=1) - 255) <= 64).all()
        assert inter["av"].scale == pytest.approx(A_SCALE * inter["v"].scale / task.quant["av"].real_multiplier)


def test_attention_task_requires_all_stages(rng):
    t = _task(rng)
    with pytest.raises(QuantError):
        AttentionHeadTask(t.x, t.wq, t.wk, t.wv, t.wo, quant={"q": t.quant["q"]})
