"""Compact vision transformer: forward pass, quantized forward, toy trainer.

The forward pass is built from the tape primitives so that one recorded pass
supplies gradients (reverse walk) and relevance (rule-based reverse walk) for
every quantization site. Hooks capture, per site, exactly the tensors a
quantizer would consume, plus each block's post-softmax attention map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import CalibrationError, ConfigError, ContractError, DivergenceError
from .layers import LayerId, head_id, stem_id
from .quantizers import QuantParams, fake_quant

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters of the compact ViT."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    classes: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        for name in ("image_size", "patch_size", "channels", "embed_dim", "heads", "blocks", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def tokens(self) -> int:
        return self.n_patches + 1

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "embed_dim": self.embed_dim,
            "heads": self.heads, "blocks": self.blocks,
            "mlp_ratio": self.mlp_ratio, "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        return cls(
            image_size=int(d["image_size"]), patch_size=int(d["patch_size"]),
            channels=int(d["channels"]), embed_dim=int(d["embed_dim"]),
            heads=int(d["heads"]), blocks=int(d["blocks"]),
            mlp_ratio=float(d["mlp_ratio"]), classes=int(d["classes"]),
        )


_BLOCK_FIELDS = (
    ("ln1.gamma", "ln1_gamma"), ("ln1.beta", "ln1_beta"),
    ("qkv.weight", "w_qkv"), ("qkv.bias", "b_qkv"),
    ("proj.weight", "w_proj"), ("proj.bias", "b_proj"),
    ("ln2.gamma", "ln2_gamma"), ("ln2.beta", "ln2_beta"),
    ("fc1.weight", "w_fc1"), ("fc1.bias", "b_fc1"),
    ("fc2.weight", "w_fc2"), ("fc2.bias", "b_fc2"),
)


@dataclass
class BlockParams:
    ln1_gamma: T.Tensor
    ln1_beta: T.Tensor
    w_qkv: T.Tensor
    b_qkv: T.Tensor
    w_proj: T.Tensor
    b_proj: T.Tensor
    ln2_gamma: T.Tensor
    ln2_beta: T.Tensor
    w_fc1: T.Tensor
    b_fc1: T.Tensor
    w_fc2: T.Tensor
    b_fc2: T.Tensor


@dataclass
class ViTParams:
    """All learnable parameters, shape-checked against the config."""

    config: ViTConfig
    w_patch: T.Tensor
    b_patch: T.Tensor
    cls_token: T.Tensor  # stored [1, D] so it enters the token concat directly
    pos_embed: T.Tensor
    blocks: list[BlockParams]
    ln_f_gamma: T.Tensor
    ln_f_beta: T.Tensor
    w_head: T.Tensor
    b_head: T.Tensor

    def named(self) -> Iterator[tuple[str, T.Tensor]]:
        yield "patch_embed.weight", self.w_patch
        yield "patch_embed.bias", self.b_patch
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, bp in enumerate(self.blocks):
            for suffix, attr in _BLOCK_FIELDS:
                yield f"blocks.{i}.{suffix}", getattr(bp, attr)
        yield "final_norm.gamma", self.ln_f_gamma
        yield "final_norm.beta", self.ln_f_beta
        yield "head.weight", self.w_head
        yield "head.bias", self.b_head

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named()}

    @classmethod
    def from_arrays(cls, config: ViTConfig, arrays: Mapping[str, np.ndarray]) -> "ViTParams":
        expected = expected_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise ContractError(f"missing parameter tensors: {sorted(missing)}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name}: shape {arr.shape} != expected {shape}")
            tensors[name] = T.tensor(arr, param=True, name=name)
        blocks = []
        for i in range(config.blocks):
            blocks.append(BlockParams(**{
                attr: tensors[f"blocks.{i}.{suffix}"] for suffix, attr in _BLOCK_FIELDS
            }))
        return cls(
            config=config,
            w_patch=tensors["patch_embed.weight"], b_patch=tensors["patch_embed.bias"],
            cls_token=tensors["cls_token"], pos_embed=tensors["pos_embed"],
            blocks=blocks,
            ln_f_gamma=tensors["final_norm.gamma"], ln_f_beta=tensors["final_norm.beta"],
            w_head=tensors["head.weight"], b_head=tensors["head.bias"],
        )


def expected_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, hdim, tokens = cfg.embed_dim, cfg.hidden_dim, cfg.tokens
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (tokens, d),
        "final_norm.gamma": (d,),
        "final_norm.beta": (d,),
        "head.weight": (d, cfg.classes),
        "head.bias": (cfg.classes,),
    }
    per_block = {
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "qkv.weight": (d, 3 * d), "qkv.bias": (3 * d,),
        "proj.weight": (d, d), "proj.bias": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
        "fc1.weight": (d, hdim), "fc1.bias": (hdim,),
        "fc2.weight": (hdim, d), "fc2.bias": (d,),
    }
    for i in range(cfg.blocks):
        for suffix, shape in per_block.items():
            shapes[f"blocks.{i}.{suffix}"] = shape
    return shapes


def weight_tensor_name(lid: LayerId) -> str:
    """Canonical parameter name of a weight-bearing layer's weight matrix."""
    if lid.kind == "patch_embed":
        return "patch_embed.weight"
    if lid.kind == "head":
        return "head.weight"
    return f"blocks.{lid.block - 1}.{lid.kind}.weight"


def weight_counts(cfg: ViTConfig) -> dict[LayerId, int]:
    """Weight-matrix element counts per weight-bearing layer (biases excluded)."""
    d, hdim = cfg.embed_dim, cfg.hidden_dim
    counts = {stem_id(): cfg.patch_dim * d, head_id(): d * cfg.classes}
    for b in range(1, cfg.blocks + 1):
        counts[LayerId(b, "qkv")] = d * 3 * d
        counts[LayerId(b, "proj")] = d * d
        counts[LayerId(b, "fc1")] = d * hdim
        counts[LayerId(b, "fc2")] = hdim * d
    return counts


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    while True:
        mask = np.abs(out) > 2.0
        if not mask.any():
            break
        out[mask] = rng.standard_normal(int(mask.sum()))
    return out * std


def init_params(cfg: ViTConfig, seed: int) -> ViTParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".bias") or name.endswith(".beta"):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = _truncated_normal(rng, shape, INIT_STD)
    return ViTParams.from_arrays(cfg, arrays)


def patchify(image: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Rearrange an H x W x C image into row-major flattened patches."""
    image = np.asarray(image, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} does not match config {expected}")
    p = cfg.patch_size
    side = cfg.image_size // p
    tiles = image.reshape(side, p, side, p, cfg.channels).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(cfg.n_patches, cfg.patch_dim))


@dataclass
class ActivationRecord:
    """Per-site observations from one hooked forward pass.

    ``inputs[lid]`` holds exactly the tensors that site's quantizer consumes
    (for matmul1 the Q and K operands; for matmul2 the V operand, since the
    attention map is owned by the attn site). ``attention[b]`` is block b's
    post-softmax map, one row per head.
    """

    inputs: dict[LayerId, tuple[T.Tensor, ...]] = field(default_factory=dict)
    attention: dict[int, T.Tensor] = field(default_factory=dict)
    patch_tokens: T.Tensor | None = None


class _QuantApply:
    """Applies a QuantModel's fake quantization at each site, caching weights."""

    def __init__(self, qmodel):
        self.qmodel = qmodel
        self._weights: dict[LayerId, T.Tensor] = {}

    def act(self, lid: LayerId, t: T.Tensor) -> T.Tensor:
        qp = self.qmodel.activations.get(lid)
        if qp is None:
            raise CalibrationError(f"no activation calibration for layer {lid}")
        return T.Tensor._wrap(fake_quant(t.data, qp))

    def weight(self, lid: LayerId, t: T.Tensor) -> T.Tensor:
        cached = self._weights.get(lid)
        if cached is not None:
            return cached
        qp = self.qmodel.weights.get(lid)
        if qp is None:
            raise CalibrationError(f"no weight calibration for layer {lid}")
        out = T.Tensor._wrap(fake_quant(t.data, qp))
        self._weights[lid] = out
        return out


def _split_heads(t2d: T.Tensor, tokens: int, heads: int, head_dim: int) -> T.Tensor:
    return T.transpose(T.reshape(t2d, (tokens, heads, head_dim)), (1, 0, 2))


def _block_forward(x: T.Tensor, bp: BlockParams, bi: int, cfg: ViTConfig,
                   record: ActivationRecord | None, quant: _QuantApply | None) -> T.Tensor:
    d, heads, hd, tokens = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.tokens

    ln1 = T.layernorm(x, bp.ln1_gamma, bp.ln1_beta, LN_EPS)
    qkv_id = LayerId(bi, "qkv")
    if record is not None:
        record.inputs[qkv_id] = (ln1,)
    ln1_in = quant.act(qkv_id, ln1) if quant else ln1
    w_qkv = quant.weight(qkv_id, bp.w_qkv) if quant else bp.w_qkv
    qkv = T.linear(ln1_in, w_qkv, bp.b_qkv)

    q = _split_heads(T.narrow(qkv, 1, 0, d), tokens, heads, hd)
    k = _split_heads(T.narrow(qkv, 1, d, d), tokens, heads, hd)
    v = _split_heads(T.narrow(qkv, 1, 2 * d, d), tokens, heads, hd)

    mm1_id = LayerId(bi, "matmul1")
    if record is not None:
        record.inputs[mm1_id] = (q, k)
    if quant:
        q = quant.act(mm1_id, q)
        k = quant.act(mm1_id, k)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    attn = T.softmax(scores, axis=-1)

    attn_id = LayerId(bi, "attn")
    if record is not None:
        record.inputs[attn_id] = (attn,)
        record.attention[bi] = attn
    if quant:
        attn = quant.act(attn_id, attn)

    mm2_id = LayerId(bi, "matmul2")
    if record is not None:
        record.inputs[mm2_id] = (v,)
    if quant:
        v = quant.act(mm2_id, v)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (tokens, d))

    proj_id = LayerId(bi, "proj")
    if record is not None:
        record.inputs[proj_id] = (ctx,)
    ctx_in = quant.act(proj_id, ctx) if quant else ctx
    w_proj = quant.weight(proj_id, bp.w_proj) if quant else bp.w_proj
    y = T.add(x, T.linear(ctx_in, w_proj, bp.b_proj))

    ln2 = T.layernorm(y, bp.ln2_gamma, bp.ln2_beta, LN_EPS)
    fc1_id = LayerId(bi, "fc1")
    if record is not None:
        record.inputs[fc1_id] = (ln2,)
    ln2_in = quant.act(fc1_id, ln2) if quant else ln2
    w_fc1 = quant.weight(fc1_id, bp.w_fc1) if quant else bp.w_fc1
    hidden = T.gelu(T.linear(ln2_in, w_fc1, bp.b_fc1))

    fc2_id = LayerId(bi, "fc2")
    if record is not None:
        record.inputs[fc2_id] = (hidden,)
    hidden_in = quant.act(fc2_id, hidden) if quant else hidden
    w_fc2 = quant.weight(fc2_id, bp.w_fc2) if quant else bp.w_fc2
    return T.add(y, T.linear(hidden_in, w_fc2, bp.b_fc2))


def _forward_impl(params: ViTParams, image: np.ndarray,
                  record: ActivationRecord | None = None,
                  quant: _QuantApply | None = None) -> T.Tensor:
    cfg = params.config
    patches = T.tensor(patchify(image, cfg))
    if record is not None:
        record.patch_tokens = patches
        record.inputs[stem_id()] = (patches,)

    sid = stem_id()
    patches_in = quant.act(sid, patches) if quant else patches
    w_patch = quant.weight(sid, params.w_patch) if quant else params.w_patch
    emb = T.linear(patches_in, w_patch, params.b_patch)

    x = T.concat([params.cls_token, emb], axis=0)
    x = T.add(x, params.pos_embed)
    for bi, bp in enumerate(params.blocks, start=1):
        x = _block_forward(x, bp, bi, cfg, record, quant)

    x = T.layernorm(x, params.ln_f_gamma, params.ln_f_beta, LN_EPS)
    cls_repr = T.narrow(x, 0, 0, 1)

    hid = head_id()
    if record is not None:
        record.inputs[hid] = (cls_repr,)
    cls_in = quant.act(hid, cls_repr) if quant else cls_repr
    w_head = quant.weight(hid, params.w_head) if quant else params.w_head
    logits = T.linear(cls_in, w_head, params.b_head)
    return T.reshape(logits, (cfg.classes,))


class ForwardResult(NamedTuple):
    logits: T.Tensor
    record: ActivationRecord | None
    tape: T.Tape | None


def forward(params: ViTParams, image: np.ndarray, hooks: bool = False) -> ForwardResult:
    """Full-precision forward pass.

    With ``hooks`` the pass is recorded: the result carries an
    ActivationRecord covering every quantization site and the tape needed
    for gradient and relevance propagation.
    """
    if not hooks:
        return ForwardResult(_forward_impl(params, image), None, None)
    record = ActivationRecord()
    with T.Tape() as tape:
        logits = _forward_impl(params, image, record=record)
    return ForwardResult(logits, record, tape)


def forward_quantized(params: ViTParams, image: np.ndarray, qmodel) -> np.ndarray:
    """Forward pass with fake quantization at every calibrated site.

    LayerNorm, residual adds and the GELU interior stay full precision; the
    post-softmax map goes through the logarithmic quantizer; everything else
    uses its uniform QuantParams.
    """
    return _forward_impl(params, image, quant=_QuantApply(qmodel)).data


def predict_logits(params: ViTParams, image: np.ndarray) -> np.ndarray:
    return _forward_impl(params, image).data


def _cross_entropy_nodes(logits: T.Tensor, label: int) -> T.Tensor:
    picked = T.narrow(T.log_softmax(logits, axis=0), 0, int(label), 1)
    return T.scale(T.sum_all(picked), -1.0)


def mean_cross_entropy(params: ViTParams, images: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for img, lab in zip(images, labels):
        logits = predict_logits(params, img)
        shifted = logits - logits.max()
        total += math.log(np.exp(shifted).sum()) - shifted[int(lab)]
    return total / len(labels)


def train_toy(params: ViTParams, dataset, epochs: int, lr: float, seed: int,
              batch_size: int = 16) -> ViTParams:
    """Plain minibatch SGD with cross-entropy on the tape gradients.

    Deterministic for a fixed seed: shuffling comes from one seeded
    generator and gradient accumulation order is fixed.
    """
    images, labels = np.asarray(dataset.images), np.asarray(dataset.labels)
    if len(images) == 0:
        raise ContractError("training dataset is empty")
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    rng = np.random.default_rng(seed)
    arrays = {name: arr.copy() for name, arr in params.to_arrays().items()}
    cfg = params.config

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            p = ViTParams.from_arrays(cfg, arrays)
            named = dict(p.named())
            acc = {name: np.zeros_like(arr) for name, arr in arrays.items()}
            batch_loss = 0.0
            for idx in batch:
                with T.Tape() as tape:
                    logits = _forward_impl(p, images[idx])
                    loss = _cross_entropy_nodes(logits, int(labels[idx]))
                batch_loss += float(loss.data)
                grads = T.backward(tape, loss, 1.0)
                for name, t in named.items():
                    acc[name] += grads[t]
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            inv = lr / len(batch)
            for name in arrays:
                arrays[name] -= inv * acc[name]
    return ViTParams.from_arrays(cfg, arrays)
