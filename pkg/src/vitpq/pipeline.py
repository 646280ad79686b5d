"""End-to-end orchestration: calibrate, score, allocate, quantize, evaluate.

Every stage is a pure function of its inputs plus explicit seeds, so two
runs with the same configuration produce byte-identical artifacts. The
ablation driver reproduces, at desk scale, the quantizer-mode comparison
(layer-wise / channel-wise / scale-reparam / clipped channel-wise / clipped
channel-wise + mixed precision) and the bit-allocation comparison (single- or
two-block boosts, with and without importance-guided demotion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import crl
from .allocation import (
    BitAllocation,
    GREEDY_MODE,
    allocate_bits,
    model_size_bits,
    uniform_allocation,
)
from .config import RunConfig
from .data import LabeledDataset
from .errors import CalibrationError, ConfigError
from .layers import LayerId, all_layer_ids
from .lrp import ImportanceTable, contribution_scores, importance_scores
from .quantizers import (
    LOGSQRT2,
    QuantModel,
    QuantParams,
    log_calibrate,
    uniform_calibrate,
    PER_CHANNEL,
)
from .vit import (
    ActivationRecord,
    ViTParams,
    forward,
    forward_quantized,
    init_params,
    predict_logits,
    train_toy,
    weight_counts,
    weight_tensor_name,
)

FP_WEIGHT_BITS = 32


def collect_records(params: ViTParams, images: np.ndarray) -> list[ActivationRecord]:
    return [forward(params, img, hooks=True).record for img in images]


def _pooled_site_inputs(records: Sequence[ActivationRecord], lid: LayerId) -> list[np.ndarray]:
    pooled = []
    for rec in records:
        tensors = rec.inputs.get(lid)
        if not tensors:
            raise CalibrationError(f"calibration records missing site {lid}")
        pooled.extend(t.data for t in tensors)
    return pooled


def calibrate_model(params: ViTParams, calib: LabeledDataset, alloc: BitAllocation,
                    cfg: RunConfig) -> tuple[ViTParams, QuantModel]:
    """One hooked pass per calibration image, then per-site quantizer fitting.

    Post-LayerNorm activation sites (qkv/fc1 inputs) follow
    ``cfg.ln_act_mode``; the attention map uses the log-sqrt2 quantizer with
    its log2 two-scale decomposition recorded; every other activation site
    uses per-layer percentile calibration; weights (taken after any
    reparameterization) use exact min/max per output channel.
    """
    if len(calib) == 0:
        raise CalibrationError("calibration set is empty")
    layer_ids = all_layer_ids(params.config.blocks)
    unknown = [str(lid) for lid in alloc.entries if lid not in set(layer_ids)]
    if unknown:
        raise ConfigError(f"allocation references layers absent from the config: {unknown}")
    if not alloc.covers(layer_ids):
        missing = [str(lid) for lid in layer_ids if lid not in alloc.entries]
        raise ConfigError(f"allocation does not cover layers: {missing}")

    records = collect_records(params, calib.images)
    ln_sites = [lid for lid in layer_ids if lid.kind in ("qkv", "fc1")]
    activations: dict[LayerId, QuantParams] = {}
    provenance: dict = {
        "ln_act_mode": cfg.ln_act_mode,
        "percentile": cfg.percentile,
        "n_sigma": cfg.n_sigma,
        "calib_size": len(calib),
        "seed": cfg.seed,
        "allocation_mode": alloc.mode,
        "attn_two_scale": {},
    }

    mode = cfg.ln_act_mode
    if mode in ("clipped_cw", "scale_reparam"):
        n_sigma = cfg.n_sigma if mode == "clipped_cw" else 0.0
        bits_map = {lid: alloc.act_bits(lid) for lid in ln_sites}
        params_q, installed = crl.apply_crl(params, records, n_sigma=n_sigma, bits=bits_map)
        for lid, channel_q in installed.items():
            if mode == "clipped_cw":
                activations[lid] = crl.channel_quant_to_qparams(channel_q, alloc.act_bits(lid))
            else:
                activations[lid] = crl.reduce_to_layer_qparams(channel_q, alloc.act_bits(lid))
    else:
        params_q = params
        for lid in ln_sites:
            pooled = _pooled_site_inputs(records, lid)
            if mode == "channel_wise":
                channel_q = crl.channelwise_calibrate(pooled, alloc.act_bits(lid))
                activations[lid] = crl.channel_quant_to_qparams(channel_q, alloc.act_bits(lid))
            else:  # layer_wise
                activations[lid] = uniform_calibrate(pooled, alloc.act_bits(lid), cfg.percentile)

    for lid in layer_ids:
        if lid in activations:
            continue
        pooled = _pooled_site_inputs(records, lid)
        if lid.kind == "attn":
            qp = log_calibrate(pooled, alloc.act_bits(lid), cfg.percentile, scheme=LOGSQRT2)
            activations[lid] = qp
            scale = float(qp.scale)
            provenance["attn_two_scale"][str(lid)] = [scale, scale / math.sqrt(2.0)]
        else:
            activations[lid] = uniform_calibrate(pooled, alloc.act_bits(lid), cfg.percentile)

    weights: dict[LayerId, QuantParams] = {}
    arrays = params_q.to_arrays()
    for lid in layer_ids:
        if lid.has_weights:
            weights[lid] = uniform_calibrate(
                arrays[weight_tensor_name(lid)], alloc.weight_bits(lid),
                percentile=100.0, granularity=PER_CHANNEL,
            )

    qmodel = QuantModel(weights, activations, alloc, provenance)
    qmodel.validate_coverage(layer_ids)
    return params_q, qmodel


@dataclass
class EvalReport:
    """Accuracy and fidelity of one (possibly quantized) model on one dataset."""

    label: str
    top1: float
    agreement: float
    mean_abs_logit_dev: float
    model_size_bits: int
    n_images: int
    bit_table: dict[str, list]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0 or not 0.0 <= self.agreement <= 1.0:
            raise ConfigError("top1 and agreement must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "top1": self.top1,
            "agreement": self.agreement,
            "mean_abs_logit_dev": self.mean_abs_logit_dev,
            "model_size_bits": self.model_size_bits,
            "n_images": self.n_images,
            "bit_table": self.bit_table,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**d)

    def human_row(self) -> str:
        return (f"{self.label:<24s} top1={100 * self.top1:6.2f}%  "
                f"agree={100 * self.agreement:6.2f}%  "
                f"|dlogit|={self.mean_abs_logit_dev:.6f}  "
                f"size={self.model_size_bits} bits")


def evaluate(params: ViTParams, qmodel: QuantModel | None, dataset: LabeledDataset,
             label: str = "model", provenance: Mapping | None = None) -> EvalReport:
    """Top-1 accuracy, full-precision agreement and logit deviation.

    The full-precision reference runs on the same ``params`` (for a
    CRL-folded model the fold is FP-exact, so comparisons across quantizer
    modes stay apples-to-apples).
    """
    if len(dataset) == 0:
        raise ConfigError("evaluation dataset is empty")
    counts = weight_counts(params.config)
    hits = agree = 0
    dev = 0.0
    for img, lab in zip(dataset.images, dataset.labels):
        fp = predict_logits(params, img)
        q = forward_quantized(params, img, qmodel) if qmodel is not None else fp
        hits += int(q.argmax() == lab)
        agree += int(q.argmax() == fp.argmax())
        dev += float(np.abs(q - fp).mean())
    n = len(dataset)
    if qmodel is not None:
        size = model_size_bits(qmodel.allocation, counts)
        bit_table = {str(lid): list(qmodel.allocation.entries[lid])
                     for lid in sorted(qmodel.allocation.entries, key=str)}
    else:
        size = sum(counts.values()) * FP_WEIGHT_BITS
        bit_table = {str(lid): [FP_WEIGHT_BITS, FP_WEIGHT_BITS] for lid in sorted(counts, key=str)}
    return EvalReport(
        label=label, top1=hits / n, agreement=agree / n, mean_abs_logit_dev=dev / n,
        model_size_bits=size, n_images=n, bit_table=bit_table,
        provenance=dict(provenance or {}),
    )


def score_importance(params: ViTParams, dataset: LabeledDataset,
                     cfg: RunConfig) -> ImportanceTable:
    contributions = contribution_scores(params, dataset, cfg.importance_samples,
                                        cfg.importance_seed)
    return importance_scores(contributions, cfg.importance_samples)


def boost_only_allocation(base_bits: int, n_blocks: int, boost_blocks: int) -> BitAllocation:
    """Uniform allocation with the first blocks raised one bit (no demotion);
    exceeds the uniform size budget by construction, reported as such."""
    alloc = uniform_allocation(base_bits, n_blocks)
    entries = dict(alloc.entries)
    for lid in list(entries):
        if 1 <= lid.block <= boost_blocks:
            wb, ab = entries[lid]
            entries[lid] = (None if wb is None else wb + 1, ab + 1)
    return BitAllocation("boost-only", entries)


def train_checkpoint(cfg: RunConfig, train: LabeledDataset) -> ViTParams:
    """Init, train, and (when configured) spread per-channel scales.

    ``channel_spread_seed`` applies the function-preserving channel-profile
    refactoring after training, giving the checkpoint the post-LayerNorm
    inter-channel variation that full-scale pretrained transformers show.
    """
    params = init_params(cfg.vit, cfg.init_seed)
    params = train_toy(params, train, epochs=cfg.train_epochs, lr=cfg.train_lr,
                       seed=cfg.train_seed, batch_size=cfg.train_batch)
    if cfg.channel_spread_seed is not None:
        params = crl.widen_channel_variation(params, cfg.channel_spread_seed)
    return params


@dataclass
class AblationResult:
    quantizer_rows: list[EvalReport]
    allocation_rows: list[EvalReport]
    importance: ImportanceTable
    config_hash: str

    def reports(self) -> list[EvalReport]:
        return self.quantizer_rows + self.allocation_rows


def run_ablation(cfg: RunConfig, params: ViTParams, calib: LabeledDataset,
                 eval_ds: LabeledDataset, train: LabeledDataset) -> AblationResult:
    """Evaluate every quantizer mode and bit-allocation scheme on one checkpoint."""
    n_blocks = cfg.vit.blocks
    counts = weight_counts(cfg.vit)
    base = cfg.base_bits
    prov = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "base_bits": base}

    quantizer_rows = [evaluate(params, None, eval_ds, label="full-precision", provenance=prov)]
    uniform_alloc = uniform_allocation(base, n_blocks)
    for mode in ("layer_wise", "channel_wise", "scale_reparam", "clipped_cw"):
        params_q, qmodel = calibrate_model(params, calib, uniform_alloc,
                                           cfg.override(ln_act_mode=mode))
        quantizer_rows.append(
            evaluate(params_q, qmodel, eval_ds, label=mode, provenance=prov)
        )

    importance = score_importance(params, train, cfg)
    greedy = allocate_bits(importance.importance, base, GREEDY_MODE, counts,
                           boost_blocks=cfg.boost_blocks, demote_depth=cfg.demote_depth)
    params_q, qmodel = calibrate_model(params, calib, greedy, cfg.override(ln_act_mode="clipped_cw"))
    quantizer_rows.append(
        evaluate(params_q, qmodel, eval_ds, label="clipped_cw+MP", provenance=prov)
    )

    allocation_rows = []
    uniform_row = next(r for r in quantizer_rows if r.label == "clipped_cw")
    allocation_rows.append(EvalReport(**{**uniform_row.to_dict(), "label": f"uniform-{base}/{base}"}))
    for boost in (1, 2):
        alloc = boost_only_allocation(base, n_blocks, boost)
        params_q, qmodel = calibrate_model(params, calib, alloc, cfg)
        allocation_rows.append(
            evaluate(params_q, qmodel, eval_ds, label=f"boost-B1-{boost}-only", provenance=prov)
        )
        lrp_alloc = allocate_bits(importance.importance, base, GREEDY_MODE, counts,
                                  boost_blocks=boost, demote_depth=cfg.demote_depth)
        params_q, qmodel = calibrate_model(params, calib, lrp_alloc, cfg)
        allocation_rows.append(
            evaluate(params_q, qmodel, eval_ds, label=f"boost-B1-{boost}+LRP", provenance=prov)
        )

    return AblationResult(quantizer_rows, allocation_rows, importance, cfg.config_hash())


def render_report(result: AblationResult, cfg: RunConfig) -> str:
    counts = weight_counts(cfg.vit)
    budget = sum(counts.values()) * cfg.base_bits
    lines = [
        "vitpq ablation report",
        f"config-hash: {result.config_hash}",
        f"uniform-{cfg.base_bits}bit weight budget: {budget} bits",
        "",
        "[quantizer modes]",
    ]
    lines.extend(r.human_row() for r in result.quantizer_rows)
    lines.append("")
    lines.append("[bit allocation]")
    for r in result.allocation_rows:
        flag = "within-budget" if r.model_size_bits <= budget else "over-budget"
        lines.append(f"{r.human_row()}  [{flag}]")
    lines.append("")
    lines.append("[importance]")
    for line in result.importance.to_text().splitlines():
        lines.append("  " + line)
    return "\n".join(lines) + "\n"
