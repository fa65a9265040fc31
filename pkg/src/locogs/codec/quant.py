"""Uniform k-bit quantization inside a clipped distributional range."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def clip_multiplier(bits: int) -> float:
    """Half-width of the kept range in standard deviations: ``3 + 3(k - 1)/15``."""
    return 3.0 + 3.0 * (bits - 1) / 15.0


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    mean: float
    std: float
    clip: float
    degenerate: bool = False

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in 1..16")
        if not (self.std > 0 or self.degenerate):
            raise ValueError("std must be positive unless the quantizer is degenerate")

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def lo(self) -> float:
        return self.mean - self.clip * self.std

    @property
    def hi(self) -> float:
        return self.mean + self.clip * self.std

    @property
    def step(self) -> float:
        return 0.0 if self.degenerate else (self.hi - self.lo) / self.levels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(int(d["bits"]), float(d["mean"]), float(d["std"]), float(d["clip"]), bool(d["degenerate"]))


def quantize(values, bits: int) -> tuple[np.ndarray, QuantSpec]:
    """Clip to ``mean +- clip_multiplier(bits) * std`` and bin into ``2**bits`` equal cells.

    Constant input yields the degenerate spec: all codes 0, exact reconstruction.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot quantize an empty array")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    dtype = np.uint8 if bits <= 8 else np.uint16
    if np.all(x == x[0]):
        return np.zeros(x.shape, dtype), QuantSpec(bits, float(x[0]), 0.0, clip_multiplier(bits), True)
    mean = float(x.mean())
    # rescale before squaring so tiny spreads do not underflow to a zero std
    spread = float(np.max(np.abs(x - mean))) or float(np.max(np.abs(x)))
    spec = QuantSpec(bits, mean, spread * float(np.std(x / spread)), clip_multiplier(bits))
    codes = np.floor((np.clip(x, spec.lo, spec.hi) - spec.lo) / spec.step)
    return np.clip(codes, 0, spec.levels - 1).astype(dtype), spec


def dequantize(codes, spec: QuantSpec) -> np.ndarray:
    """Cell centers ``lo + (code + 0.5) * step``."""
    c = np.asarray(codes, dtype=np.float64)
    if spec.degenerate:
        return np.full(c.shape, spec.mean)
    return spec.lo + (c + 0.5) * spec.step
