"""Signed 8-bit fixed-point scalars (Q0.7).

A value is stored as a two's-complement byte ``raw`` and read as ``raw / 128``,
so the representable range is [-1.0, 127/128]. Rounding is half away from zero
and out-of-range inputs saturate. Note that +1.0 saturates to 127/128.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRACTION_BITS = 7
SCALE = 1 << FRACTION_BITS
RAW_MIN = -128
RAW_MAX = 127
VALUE_MIN = RAW_MIN / SCALE
VALUE_MAX = RAW_MAX / SCALE
LSB = 1.0 / SCALE


class FixedPointError(ValueError):
    """Raised when a non-finite value reaches the quantizer."""


@dataclass(frozen=True, order=True)
class FixedPoint8:
    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ValueError(f"raw value {self.raw} outside [{RAW_MIN}, {RAW_MAX}]")

    @property
    def value(self) -> float:
        return dequantize(self)

    def __float__(self) -> float:
        return dequantize(self)


def quantize(x: float) -> FixedPoint8:
    if not math.isfinite(x):
        raise FixedPointError(f"cannot quantize non-finite value {x!r}")
    return FixedPoint8(int(quantize_array(np.asarray(x, dtype=np.float64))))


def dequantize(q: FixedPoint8) -> float:
    return q.raw / SCALE


def quantize_array(x) -> np.ndarray:
    """Elementwise quantizer returning an ``int8`` array of raw codes."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FixedPointError("cannot quantize non-finite values")
    scaled = x * SCALE
    raw = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(raw, RAW_MIN, RAW_MAX).astype(np.int8)


def dequantize_array(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.int8).astype(np.float64) / SCALE


def round_trip(x) -> np.ndarray:
    """Project real values onto the Q0.7 grid (quantize then dequantize)."""
    return dequantize_array(quantize_array(x))
