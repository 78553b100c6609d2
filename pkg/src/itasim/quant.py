"""Integer tensor containers and fixed-point requantization.

All compute models share these semantics: symmetric quantization (zero-point
0), 8-bit activations and weights, wide signed accumulators, and a
multiply-shift-round-saturate requantizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union[int, np.ndarray]

ROUNDING_MODES = ("half_away", "half_up", "floor")

DEFAULT_ACC_BITS = 26
BIAS_BITS = 24


class QuantError(ValueError):
    """Invalid quantization parameters or tensor contents."""


class AccumulatorOverflow(ArithmeticError):
    """A value left the declared accumulator range."""

    def __init__(self, message: str, index: Optional[tuple] = None, value: Optional[int] = None):
        super().__init__(message)
        self.index = index
        self.value = value


def int_range(bits: int, signed: bool = True) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class QTensor:
    """8-bit quantized tensor; real value ~= data * scale."""

    data: np.ndarray
    scale: float = 1.0
    signed: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 0 or any(d <= 0 for d in data.shape):
            raise QuantError(f"QTensor needs a non-empty shape, got {data.shape}")
        if not self.scale > 0:
            raise QuantError(f"QTensor scale must be positive, got {self.scale}")
        lo, hi = int_range(8, self.signed)
        if data.size and (data.min() < lo or data.max() > hi):
            raise QuantError(f"QTensor data outside [{lo}, {hi}]")
        object.__setattr__(self, "data", data.astype(np.int8 if self.signed else np.uint8))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "i8" if self.signed else "u8"

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


@dataclass
class AccTensor:
    """Wide accumulator tensor bounded to ``acc_bits`` signed bits."""

    data: np.ndarray
    acc_bits: int = DEFAULT_ACC_BITS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        check_range(self.data, self.acc_bits)

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class QuantParams:
    multiplier: int = 1
    shift: int = 0
    rounding: str = "half_away"
    signed: bool = True

    def __post_init__(self):
        if self.multiplier < 0 or self.multiplier >= 1 << 31:
            raise QuantError(f"multiplier must be in [0, 2^31), got {self.multiplier}")
        if not 0 <= self.shift <= 62:
            raise QuantError(f"shift must be in [0, 62], got {self.shift}")
        if self.rounding not in ROUNDING_MODES:
            raise QuantError(f"unknown rounding mode {self.rounding!r}")

    @property
    def real_multiplier(self) -> float:
        return self.multiplier / (1 << self.shift)

    @classmethod
    def from_real(cls, m: float, signed: bool = True, precision_bits: int = 15,
                  rounding: str = "half_away") -> "QuantParams":
        """Closest multiplier/shift pair with ``precision_bits`` of mantissa."""
        if not m > 0:
            raise QuantError(f"real multiplier must be positive, got {m}")
        shift = max(0, precision_bits - 1 - math.floor(math.log2(m)))
        shift = min(shift, 62)
        mult = int(round(m * (1 << shift)))
        while mult >= 1 << 31:
            shift -= 1
            mult = int(round(m * (1 << shift)))
        return cls(mult, shift, rounding, signed)

    def to_dict(self) -> dict:
        return {"multiplier": self.multiplier, "shift": self.shift,
                "rounding": self.rounding, "signed": self.signed}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(int(d["multiplier"]), int(d["shift"]), d.get("rounding", "half_away"),
                   bool(d.get("signed", True)))


def check_range(values: ArrayLike, bits: int, what: str = "accumulator") -> None:
    """Raise AccumulatorOverflow (with the first offending index) if out of range."""
    lo, hi = int_range(bits)
    arr = np.asarray(values)
    bad = (arr < lo) | (arr > hi)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        val = int(arr[idx]) if arr.ndim else int(arr)
        raise AccumulatorOverflow(f"{what} overflow: {val} at index {idx} exceeds {bits}-bit range",
                                  index=idx, value=val)


def rounding_shift(v: np.ndarray, shift: int, rounding: str = "half_away") -> np.ndarray:
    """Arithmetic right shift of int64 values with the requested rounding."""
    v = np.asarray(v, dtype=np.int64)
    if shift == 0:
        return v
    if rounding == "floor":
        return v >> shift
    half = np.int64(1) << (shift - 1)
    if rounding == "half_up":
        return (v + half) >> shift
    mag = (np.abs(v) + half) >> shift
    return np.where(v < 0, -mag, mag)


def saturate(v: ArrayLike, signed: bool = True, bits: int = 8) -> np.ndarray:
    lo, hi = int_range(bits, signed)
    return np.clip(v, lo, hi)


def requantize(acc: ArrayLike, p: QuantParams) -> ArrayLike:
    """saturate(round((acc * multiplier) >> shift)) into the 8-bit output range."""
    scalar = np.ndim(acc) == 0
    prod = np.asarray(acc, dtype=np.int64) * np.int64(p.multiplier)
    out = saturate(rounding_shift(prod, p.shift, p.rounding), p.signed)
    if scalar:
        return int(out)
    return out.astype(np.int8 if p.signed else np.uint8)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_real(x, scale: float, signed: bool = True):
    if not scale > 0:
        raise QuantError(f"scale must be positive, got {scale}")
    q = saturate(_round_half_away(np.asarray(x, dtype=np.float64) / scale), signed)
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.int8 if signed else np.uint8)


def dequantize(q, scale: float):
    if not scale > 0:
        raise QuantError(f"scale must be positive, got {scale}")
    out = np.asarray(q, dtype=np.float64) * scale
    return float(out) if out.ndim == 0 else out


def saturating_mac(acc: int, a: int, w: int, acc_bits: int = DEFAULT_ACC_BITS,
                   index: Optional[tuple] = None) -> int:
    """acc + a*w, faulting when the result leaves the acc_bits range."""
    lo, hi = int_range(acc_bits)
    if not lo <= acc <= hi:
        raise AccumulatorOverflow(f"accumulator input {acc} out of range", index=index, value=acc)
    out = acc + a * w
    if not lo <= out <= hi:
        raise AccumulatorOverflow(f"accumulator overflow: {out} at index {index} exceeds "
                                  f"{acc_bits}-bit range", index=index, value=out)
    return out


def worst_case_dot_bound(length: int = 64, bias_bits: int = BIAS_BITS) -> int:
    """Largest |dot product + bias| for int8 operands of the given length."""
    return length * 128 * 128 + (1 << (bias_bits - 1)) - 1
