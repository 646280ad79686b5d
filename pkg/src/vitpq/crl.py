"""Clipped reparameterization for post-LayerNorm activations.

Post-LayerNorm activations show strong inter-channel variation, which ruins
a shared quantization grid. The cure implemented here: calibrate channel-wise
scale/zero-point, clip per-channel outliers to mean +- n_sigma standard
deviations across channels, and fold the resulting variation factors
(v1 = s / s_hat, v2 = z - z_hat) into the LayerNorm affine parameters and the
next linear layer's weights and bias. The folded network computes exactly the
same function in full precision while its post-LayerNorm distribution matches
the clipped channel-wise grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import CalibrationError, ShapeError
from . import quantizers as Q


@dataclass(frozen=True)
class ChannelQuant:
    """Per-channel uniform quantization state (scale > 0, real zero-point)."""

    scale: np.ndarray
    zero_point: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point, dtype=np.float64)
        if s.ndim != 1 or s.shape != z.shape:
            raise ShapeError("ChannelQuant requires matching 1-D scale/zero-point vectors")
        if np.any(s <= 0):
            raise ShapeError("ChannelQuant scales must be positive")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


@dataclass(frozen=True)
class ReparamFactors:
    """Variation factors between original and clipped channel parameters.

    ``v1 = s / s_hat`` (multiplicative), ``v2 = z - z_hat`` (additive, kept
    real-valued so the folding identity stays exact). ``scale_orig`` is the
    pre-clip scale needed by the next-layer bias correction term s * v2.
    """

    v1: np.ndarray
    v2: np.ndarray
    scale_orig: np.ndarray

    @property
    def shift(self) -> np.ndarray:
        """The per-channel additive pre-scale shift s * v2."""
        return self.scale_orig * self.v2

    @classmethod
    def identity(cls, channels: int) -> "ReparamFactors":
        ones = np.ones(channels)
        return cls(ones, np.zeros(channels), ones)


def channelwise_calibrate(activations: Iterable[np.ndarray] | np.ndarray,
                          bits: int) -> ChannelQuant:
    """Channel-wise scale/zero-point from min/max pooled over batch and tokens."""
    qp = Q.uniform_calibrate(activations, bits=bits, percentile=100.0,
                             granularity=Q.PER_CHANNEL)
    return ChannelQuant(qp.scale, qp.zero_point.astype(np.float64))


def clip_quant_params(cq: ChannelQuant, n_sigma: float = 2.0) -> tuple[ChannelQuant, ReparamFactors]:
    """Clip channel scale/zero-point outliers at mean +- n_sigma * std.

    Population statistics over channels; the scale clip uses the std of the
    scales and the zero-point clip the std of the zero-points.
    """
    if n_sigma < 0:
        raise ValueError("n_sigma must be non-negative")
    s, z = cq.scale, cq.zero_point
    s_hat = np.clip(s, s.mean() - n_sigma * s.std(), s.mean() + n_sigma * s.std())
    z_hat = np.clip(z, z.mean() - n_sigma * z.std(), z.mean() + n_sigma * z.std())
    factors = ReparamFactors(v1=s / s_hat, v2=z - z_hat, scale_orig=s.copy())
    return ChannelQuant(s_hat, z_hat), factors


def reparameterize_layernorm(gamma: np.ndarray, beta: np.ndarray,
                             factors: ReparamFactors) -> tuple[np.ndarray, np.ndarray]:
    """Fold the variation factors into the LayerNorm affine parameters."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != factors.v1.shape or beta.shape != factors.v1.shape:
        raise ShapeError("affine parameter length does not match factor channels")
    return gamma / factors.v1, (beta + factors.shift) / factors.v1


def reparameterize_next_layer(w: np.ndarray, b: np.ndarray,
                              factors: ReparamFactors) -> tuple[np.ndarray, np.ndarray]:
    """Compensate the next linear layer: scale its input rows, correct its bias."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != factors.v1.shape[0]:
        raise ShapeError(
            f"next-layer weight input dim {w.shape} does not match {factors.v1.shape[0]} channels"
        )
    return factors.v1[:, None] * w, b - factors.shift @ w


def apply_reparam_to_activations(x: np.ndarray, factors: ReparamFactors) -> np.ndarray:
    """The activation distribution the folded network produces: (x + s*v2) / v1."""
    return (x + factors.shift) / factors.v1


def clipped_channel_params(activations: Iterable[np.ndarray] | np.ndarray, bits: int,
                           n_sigma: float) -> tuple[ChannelQuant, ChannelQuant, ReparamFactors]:
    """Calibrate, clip, and return (original, clipped, factors) for one site."""
    cq = channelwise_calibrate(activations, bits)
    clipped, factors = clip_quant_params(cq, n_sigma)
    return cq, clipped, factors


def channel_quant_to_qparams(cq: ChannelQuant, bits: int) -> Q.QuantParams:
    """Install a ChannelQuant as per-channel uniform QuantParams.

    The real-valued zero-point is re-rounded here (and only here); the
    folding identity itself is computed with the real value.
    """
    z = np.clip(Q.round_half_away(cq.zero_point), 0, (1 << bits) - 1).astype(np.int64)
    return Q.QuantParams(Q.UNIFORM, bits, Q.PER_CHANNEL, cq.scale, z)


def reduce_to_layer_qparams(cq: ChannelQuant, bits: int) -> Q.QuantParams:
    """Collapse clipped channel parameters to one per-layer scalar quantizer.

    Used by the scale-reparameterization comparison mode, which folds every
    channel to the channel-mean scale/zero-point and then runs a plain
    per-layer grid at inference.
    """
    scale = np.asarray(float(cq.scale.mean()))
    z = np.clip(Q.round_half_away(np.asarray(float(cq.zero_point.mean()))),
                0, (1 << bits) - 1).astype(np.int64)
    return Q.QuantParams(Q.UNIFORM, bits, Q.PER_LAYER, scale, z)


def widen_channel_variation(params, seed: int, scale_sigma: float = 0.3,
                            outlier_channels: int = 3,
                            outlier_scale: tuple[float, float] = (5.0, 9.0),
                            shift_sigma: float = 0.5,
                            outlier_shift: tuple[float, float] = (4.0, 8.0)):
    """Function-preserving refactoring that spreads per-channel scales.

    Inter-channel variation of post-LayerNorm activations is a gauge freedom
    of the network: scaling channel c by a_c and shifting it by t_c can be
    folded into the LayerNorm affine parameters and undone inside the next
    linear layer (the exact inverse of the clipped-reparameterization fold),
    leaving every output bit-for-bit equivalent in exact arithmetic. Large
    pretrained transformers exhibit exactly this kind of variation; compact
    freshly-trained models do not. This helper installs a seeded heavy-tailed
    channel profile (a few outlier channels per LayerNorm site) so that
    desk-scale checkpoints reproduce the quantization behavior of their
    full-scale counterparts. Full-precision outputs are unchanged up to
    float rounding (~1e-9 per logit on the toy config).
    """
    from .vit import ViTParams

    rng = np.random.default_rng(seed)
    arrays = params.to_arrays()
    d = params.config.embed_dim
    for i in range(params.config.blocks):
        for ln_prefix, next_prefix in (
            (f"blocks.{i}.ln1", f"blocks.{i}.qkv"),
            (f"blocks.{i}.ln2", f"blocks.{i}.fc1"),
        ):
            a = np.exp(rng.normal(0.0, scale_sigma, d))
            t = rng.normal(0.0, shift_sigma, d)
            picks = rng.choice(d, size=2 * outlier_channels, replace=False)
            a[picks[:outlier_channels]] *= rng.uniform(*outlier_scale, outlier_channels)
            t[picks[outlier_channels:]] += (
                rng.uniform(*outlier_shift, outlier_channels)
                * rng.choice([-1.0, 1.0], outlier_channels)
            )
            w = arrays[f"{next_prefix}.weight"] / a[:, None]
            arrays[f"{ln_prefix}.gamma"] = arrays[f"{ln_prefix}.gamma"] * a
            arrays[f"{ln_prefix}.beta"] = arrays[f"{ln_prefix}.beta"] * a + t
            arrays[f"{next_prefix}.bias"] = arrays[f"{next_prefix}.bias"] - t @ w
            arrays[f"{next_prefix}.weight"] = w
    return ViTParams.from_arrays(params.config, arrays)


def apply_crl(params, records, n_sigma: float, bits):
    """Reparameterize every block's LayerNorms against their next layers.

    ``records`` is a batch of hooked-forward ActivationRecords covering the
    qkv and fc1 input sites of each block; ``bits`` is an int or a
    per-LayerId mapping of activation bit widths. Returns the folded params
    and the clipped channel-wise ChannelQuant to install on the qkv/fc1
    activation sites. The folded network's full-precision outputs equal the
    original's (the compensation is exact); only the residual-bypassing
    LayerNorm-to-linear path is rewritten.
    """
    from .layers import LayerId
    from .vit import ViTParams

    records = list(records)
    if not records:
        raise CalibrationError("apply_crl needs at least one calibration record")

    def bits_for(lid: LayerId) -> int:
        return int(bits[lid]) if isinstance(bits, Mapping) else int(bits)

    def pooled(lid: LayerId) -> list[np.ndarray]:
        acts = []
        for rec in records:
            got = rec.inputs.get(lid)
            if not got:
                raise CalibrationError(f"calibration records missing site {lid}")
            acts.append(got[0].data)
        return acts

    arrays = params.to_arrays()
    installed: dict[LayerId, ChannelQuant] = {}
    for i in range(params.config.blocks):
        block = i + 1
        for lid, ln_prefix, next_prefix in (
            (LayerId(block, "qkv"), f"blocks.{i}.ln1", f"blocks.{i}.qkv"),
            (LayerId(block, "fc1"), f"blocks.{i}.ln2", f"blocks.{i}.fc1"),
        ):
            _, clipped, factors = clipped_channel_params(pooled(lid), bits_for(lid), n_sigma)
            gamma, beta = reparameterize_layernorm(
                arrays[f"{ln_prefix}.gamma"], arrays[f"{ln_prefix}.beta"], factors
            )
            w, b = reparameterize_next_layer(
                arrays[f"{next_prefix}.weight"], arrays[f"{next_prefix}.bias"], factors
            )
            arrays[f"{ln_prefix}.gamma"] = gamma
            arrays[f"{ln_prefix}.beta"] = beta
            arrays[f"{next_prefix}.weight"] = w
            arrays[f"{next_prefix}.bias"] = b
            installed[lid] = clipped
    return ViTParams.from_arrays(params.config, arrays), installed
