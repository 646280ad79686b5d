"""Uniform and logarithmic quantizers with percentile calibration.

Three schemes are implemented:

* ``uniform`` — affine integer grid: q = clip(round(x/s) + z, 0, 2^b - 1),
  dequantized as s * (q - z). Scales come from the calibrated range divided
  by the number of steps; the range is always extended to include zero so
  the integer zero-point stays inside the code range.
* ``log2`` — exponential grid: q = clip(round(-log2(x/s)), 0, 2^b - 1),
  dequantized as s * 2^-q. Domain: x >= 0.
* ``logsqrt2`` — same with base sqrt(2) for twice the resolution; a
  ``logsqrt2_to_log2`` decomposition rewrites its codes as a hardware
  log2 grid against two precomputed scales.

Rounding is half-away-from-zero throughout. ``fake_quant`` composes
quantize-then-dequantize to simulate integer inference in floating point.
Logarithmic quantizers treat ``bits >= 32`` as full precision (identity):
their rounding error is bit-independent, so a genuine high-precision mode
needs an explicit sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .allocation import BitAllocation
from .errors import CalibrationError, ContractError, DomainError
from .layers import LayerId

SCALE_FLOOR = 1e-12
FULL_PRECISION_BITS = 32

UNIFORM = "uniform"
LOG2 = "log2"
LOGSQRT2 = "logsqrt2"
PER_LAYER = "per_layer"
PER_CHANNEL = "per_channel"

# Exponent arithmetic for the log schemes stays in base 2: code q of base
# 2^(1/f) denotes the value s * 2^(-q/f). Working with the exact factor f
# avoids amplifying the float representation error of sqrt(2) by q ulps.
_LOG_EXPONENT_FACTOR = {LOG2: 1.0, LOGSQRT2: 2.0}


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Calibrated state of one quantizer.

    ``scale`` is a 0-d array for per-layer granularity or a vector with one
    entry per channel (the trailing axis of quantized tensors). The integer
    ``zero_point`` exists for the uniform scheme only.
    """

    scheme: str
    bits: int
    granularity: str
    scale: np.ndarray
    zero_point: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in (UNIFORM, LOG2, LOGSQRT2):
            raise ContractError(f"unknown scheme {self.scheme!r}")
        if self.bits < 1:
            raise ContractError("bits must be >= 1")
        if self.granularity not in (PER_LAYER, PER_CHANNEL):
            raise ContractError(f"unknown granularity {self.granularity!r}")
        scale = np.asarray(self.scale, dtype=np.float64)
        object.__setattr__(self, "scale", scale)
        if np.any(scale <= 0):
            raise ContractError("scale must be positive")
        if self.scheme == UNIFORM:
            if self.zero_point is None:
                raise ContractError("uniform scheme requires a zero_point")
            z = np.asarray(self.zero_point, dtype=np.int64)
            if z.shape != scale.shape:
                raise ContractError("zero_point shape must match scale shape")
            if np.any(z < 0) or np.any(z > self.qmax):
                raise ContractError("zero_point out of code range")
            object.__setattr__(self, "zero_point", z)
        elif self.zero_point is not None:
            raise ContractError("logarithmic schemes carry no zero_point")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


def _pool(samples: Iterable[np.ndarray] | np.ndarray, granularity: str) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        samples = [samples]
    arrays = [np.asarray(s, dtype=np.float64) for s in samples]
    arrays = [a for a in arrays if a.size]
    if not arrays:
        raise CalibrationError("calibration requires at least one non-empty sample")
    if granularity == PER_CHANNEL:
        d = arrays[0].shape[-1]
        for a in arrays:
            if a.shape[-1] != d:
                raise CalibrationError("channel counts differ across calibration samples")
        return np.concatenate([a.reshape(-1, d) for a in arrays], axis=0)
    return np.concatenate([a.reshape(-1) for a in arrays])


def range_to_uniform_params(lo: np.ndarray, hi: np.ndarray, bits: int,
                            granularity: str) -> QuantParams:
    """Affine scale/zero-point from an observed range.

    The range is extended to include zero before dividing by the step
    count, which keeps the rounded zero-point inside [0, 2^b - 1] and makes
    constant inputs round-trip exactly.
    """
    lo = np.minimum(np.asarray(lo, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(hi, dtype=np.float64), 0.0)
    qmax = (1 << bits) - 1
    scale = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    zero = np.clip(round_half_away(-lo / scale), 0, qmax).astype(np.int64)
    return QuantParams(UNIFORM, bits, granularity, scale, zero)


def uniform_calibrate(samples: Iterable[np.ndarray] | np.ndarray, bits: int,
                      percentile: float = 100.0,
                      granularity: str = PER_LAYER) -> QuantParams:
    """Percentile-range uniform calibration over pooled samples.

    Two-sided: lo is the (100 - p)-th and hi the p-th percentile of the
    pooled values (per channel for per-channel granularity). p = 100 is the
    exact min/max.
    """
    if not 0.0 < percentile <= 100.0:
        raise CalibrationError(f"percentile must be in (0, 100], got {percentile}")
    if bits < 1:
        raise CalibrationError("bits must be >= 1")
    pooled = _pool(samples, granularity)
    axis = 0 if granularity == PER_CHANNEL else None
    if percentile == 100.0:
        lo = pooled.min(axis=axis)
        hi = pooled.max(axis=axis)
    else:
        lo = np.percentile(pooled, 100.0 - percentile, axis=axis)
        hi = np.percentile(pooled, percentile, axis=axis)
    return range_to_uniform_params(np.asarray(lo), np.asarray(hi), bits, granularity)


def log_calibrate(samples: Iterable[np.ndarray] | np.ndarray, bits: int,
                  percentile: float = 100.0, scheme: str = LOGSQRT2) -> QuantParams:
    """Scale for a logarithmic quantizer: the high percentile of the samples."""
    if scheme not in _LOG_EXPONENT_FACTOR:
        raise CalibrationError(f"log_calibrate scheme must be log2/logsqrt2, got {scheme!r}")
    if not 0.0 < percentile <= 100.0:
        raise CalibrationError(f"percentile must be in (0, 100], got {percentile}")
    pooled = _pool(samples, PER_LAYER)
    if np.any(pooled < 0):
        raise DomainError("logarithmic calibration requires non-negative samples")
    hi = pooled.max() if percentile == 100.0 else np.percentile(pooled, percentile)
    scale = np.asarray(max(float(hi), SCALE_FLOOR))
    return QuantParams(scheme, bits, PER_LAYER, scale)


def uniform_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.scheme != UNIFORM:
        raise ContractError("uniform_quant requires a uniform-scheme QuantParams")
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / qp.scale) + qp.zero_point
    return np.clip(q, 0, qp.qmax).astype(np.int64)


def uniform_dequant(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.scheme != UNIFORM:
        raise ContractError("uniform_dequant requires a uniform-scheme QuantParams")
    q = np.asarray(q)
    if np.any(q < 0) or np.any(q > qp.qmax):
        raise ContractError(f"codes outside [0, {qp.qmax}]")
    return qp.scale * (q - qp.zero_point)


def log_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Exponential-grid codes; x = 0 maps to the largest code (smallest value)."""
    factor = _LOG_EXPONENT_FACTOR.get(qp.scheme)
    if factor is None:
        raise ContractError("log_quant requires a log2/logsqrt2 QuantParams")
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("logarithmic quantization requires non-negative inputs")
    with np.errstate(divide="ignore"):
        mag = -np.log2(x / qp.scale) * factor
    # x = 0 gives mag = +inf, clipped to the largest code (smallest value).
    return round_half_away(np.clip(mag, 0.0, float(qp.qmax))).astype(np.int64)


def log_dequant(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    factor = _LOG_EXPONENT_FACTOR.get(qp.scheme)
    if factor is None:
        raise ContractError("log_dequant requires a log2/logsqrt2 QuantParams")
    q = np.asarray(q)
    if np.any(q < 0) or np.any(q > qp.qmax):
        raise ContractError(f"codes outside [0, {qp.qmax}]")
    return qp.scale * np.power(2.0, -q.astype(np.float64) / factor)


def logsqrt2_to_log2(q: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite log-sqrt2 codes as a log2 shift count plus a scale selector.

    Returns ``(k, parity)`` with ``k = floor(q / 2)`` and ``parity = q mod 2``;
    the dequantized value is ``(scale if parity == 0 else scale / sqrt(2)) * 2^-k``,
    exactly equal to ``scale * sqrt(2)^-q``. Inference then needs only
    power-of-two shifts against the two precomputed scales.
    """
    q = np.asarray(q, dtype=np.int64)
    if np.any(q < 0):
        raise ContractError("log-sqrt2 codes must be non-negative")
    return q // 2, q % 2


def two_scale_dequant(k: np.ndarray, parity: np.ndarray, scale: float) -> np.ndarray:
    scales = np.where(parity == 0, scale, scale / math.sqrt(2.0))
    return scales * np.power(2.0, -np.asarray(k, dtype=np.float64))


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize in floating point (scheme-dispatched)."""
    x = np.asarray(x, dtype=np.float64)
    if qp.scheme == UNIFORM:
        return uniform_dequant(uniform_quant(x, qp), qp)
    if qp.bits >= FULL_PRECISION_BITS:
        return x.copy()
    return log_dequant(log_quant(x, qp), qp)


@dataclass
class QuantModel:
    """Full quantization state of a model: per-layer weight/activation
    QuantParams, the bit allocation that produced them, and calibration
    provenance (percentile, sample count, seed, mode, ...)."""

    weights: dict[LayerId, QuantParams]
    activations: dict[LayerId, QuantParams]
    allocation: BitAllocation
    provenance: dict = field(default_factory=dict)

    def validate_coverage(self, layer_ids: Sequence[LayerId]) -> None:
        for lid in layer_ids:
            act = self.activations.get(lid)
            if act is None:
                raise ContractError(f"quant model missing activation params for {lid}")
            if lid.kind == "attn":
                if act.scheme not in (LOG2, LOGSQRT2):
                    raise ContractError(f"{lid} must use a logarithmic scheme")
            elif act.scheme != UNIFORM:
                raise ContractError(f"{lid} must use the uniform scheme")
            if lid.has_weights and lid not in self.weights:
                raise ContractError(f"quant model missing weight params for {lid}")
