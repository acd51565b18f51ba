"""Uniform symmetric quantisation (zero-point 0) with a straight-through estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    signed: bool
    scale: float

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("bits must be >= 2")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    def with_scale(self, scale: float) -> QuantSpec:
        return QuantSpec(self.bits, self.signed, scale)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "signed": self.signed, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> QuantSpec:
        return cls(int(d["bits"]), bool(d["signed"]), float(d["scale"]))


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def quantize(x, spec: QuantSpec):
    """``clamp(round_half_even(x / scale), qmin, qmax)``.

    Scalars give a Python int, arrays an int64 array.
    """
    codes = np.clip(np.rint(np.asarray(x, dtype=np.float64) / spec.scale), spec.qmin, spec.qmax)
    if codes.ndim == 0:
        return int(codes)
    return codes.astype(np.int64)


def dequantize(code, spec: QuantSpec):
    out = np.asarray(code, dtype=np.float64) * spec.scale
    return float(out) if out.ndim == 0 else out


def fake_quant(x, spec: QuantSpec):
    return dequantize(quantize(x, spec), spec)


def ste_mask(x, spec: QuantSpec):
    """Straight-through gradient of :func:`fake_quant`: 1 inside the clip range, else 0."""
    x = np.asarray(x, dtype=np.float64)
    mask = ((x >= spec.qmin * spec.scale) & (x <= spec.qmax * spec.scale)).astype(np.float64)
    return float(mask) if mask.ndim == 0 else mask


def maxabs_scale(w: np.ndarray, bits: int, signed: bool = True) -> float:
    _, qmax = qrange(bits, signed)
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return max(m / qmax, SCALE_FLOOR)
