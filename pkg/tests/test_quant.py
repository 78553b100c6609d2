import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itasim.quant import (AccumulatorOverflow, QTensor, QuantError, QuantParams, check_range,
                          dequantize, int_range, quantize_real, requantize, rounding_shift,
                          saturate, saturating_mac, worst_case_dot_bound)


def test_int_ranges():
    assert int_range(8) == (-128, 127)
    assert int_range(8, signed=False) == (0, 255)
    assert int_range(26) == (-(1 << 25), (1 << 25) - 1)


@pytest.mark.parametrize("acc,expected", [(5, 3), (-5, -3), (4, 2), (-4, -2), (3, 2), (-3, -2),
                                          (1, 1), (-1, -1), (0, 0)])
def test_requantize_half_away_from_zero(acc, expected):
    # multiplier 1, shift 1: acc / 2 rounded half away from zero
    assert requantize(acc, QuantParams(1, 1)) == expected


def test_requantize_saturates():
    p = QuantParams(1, 0)
    assert requantize(1000, p) == 127
    assert requantize(-1000, p) == -128
    assert requantize(-5, QuantParams(1, 0, signed=False)) == 0
    out = requantize(np.array([300, -300, 7]), p)
    assert out.dtype == np.int8 and out.tolist() == [127, -128, 7]


def test_rounding_modes():
    v = np.array([5, -5, 6, -6])
    assert rounding_shift(v, 2, "floor").tolist() == [1, -2, 1, -2]
    assert rounding_shift(v, 2, "half_up").tolist() == [1, -1, 2, -1]
    assert rounding_shift(v, 2, "half_away").tolist() == [1, -1, 2, -2]


def test_from_real_precision():
    for m in (1e-4, 0.0123, 0.5, 0.99, 3.7):
        p = QuantParams.from_real(m)
        assert abs(p.real_multiplier - m) / m < 2 ** -14
    with pytest.raises(QuantError):
        QuantParams.from_real(0.0)


def test_params_validation_and_roundtrip():
    with pytest.raises(QuantError):
        QuantParams(-1, 0)
    with pytest.raises(QuantError):
        QuantParams(1, 63)
    with pytest.raises(QuantError):
        QuantParams(1, 0, rounding="banker")
    p = QuantParams(12345, 20, "half_up", False)
    assert QuantParams.from_dict(p.to_dict()) == p


def test_qtensor_checks():
    with pytest.raises(QuantError):
        QTensor(np.array([200]))
    with pytest.raises(QuantError):
        QTensor(np.zeros((0, 3)))
    with pytest.raises(QuantError):
        QTensor(np.array([1]), scale=0.0)
    t = QTensor(np.array([200, 0]), 0.5, signed=False)
    assert t.dtype == "u8" and t.dequantize().tolist() == [100.0, 0.0]


def test_quantize_real_and_back():
    q = quantize_real(np.array([0.26, -0.26, 100.0]), 0.5)
    assert q.tolist() == [1, -1, 127]
    assert quantize_real(0.25, 0.5) == 1      # half away from zero
    assert dequantize(3, 0.25) == 0.75


def test_accumulator_checks():
    check_range(np.array([(1 << 25) - 1]), 26)
    with pytest.raises(AccumulatorOverflow) as e:
        check_range(np.array([0, 1 << 25]), 26)
    assert e.value.value == 1 << 25
    assert saturating_mac(10, -128, 127) == 10 - 128 * 127
    with pytest.raises(AccumulatorOverflow):
        saturating_mac((1 << 25) - 1, 1, 1)
    # 64 products of 128*128 plus a 24-bit bias fit in 26 bits
    assert worst_case_dot_bound() < 1 << 25


@settings(max_examples=200, deadline=None)
@given(st.integers(-(1 << 30), 1 << 30), st.integers(1, (1 << 15) - 1), st.integers(0, 30))
def test_requantize_matches_real_rounding(acc, mult, shift):
    p = QuantParams(mult, shift)
    exact = acc * mult / 2 ** shift
    r = int(np.sign(exact) * np.floor(abs(exact) + 0.5))
    assert requantize(acc, p) == max(-128, min(127, r))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=20))
def test_saturate_idempotent(xs):
    s = saturate(np.array(xs))
    assert (saturate(s) == s).all() and s.min() >= -128 and s.max() <= 127
