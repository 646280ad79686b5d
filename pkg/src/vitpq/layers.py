"""Addressing scheme for the quantized layers of the compact ViT.

Each transformer block exposes seven quantization sites; the patch-embedding
stem and the classification head add two more. ``matmul1`` (the query-key
product), ``attn`` (the post-softmax map) and ``matmul2`` (the attention-value
product) carry activation-only quantization; the remaining kinds also carry
weights.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

BLOCK_KINDS = ("qkv", "matmul1", "attn", "matmul2", "proj", "fc1", "fc2")
STEM_KIND = "patch_embed"
HEAD_KIND = "head"
WEIGHT_KINDS = frozenset({"qkv", "proj", "fc1", "fc2", STEM_KIND, HEAD_KIND})
ACTIVATION_ONLY_KINDS = frozenset({"matmul1", "attn", "matmul2"})

KIND_ORDER = {kind: i for i, kind in enumerate(BLOCK_KINDS)}


@dataclass(frozen=True, order=True)
class LayerId:
    """One quantized layer: block index in 1..L, or block 0 for stem/head."""

    block: int
    kind: str

    def __post_init__(self):
        if self.kind in (STEM_KIND, HEAD_KIND):
            if self.block != 0:
                raise ContractError(f"{self.kind} uses the stem/head sentinel block 0")
        elif self.kind in BLOCK_KINDS:
            if self.block < 1:
                raise ContractError(f"block index must be >= 1 for kind {self.kind!r}")
        else:
            raise ContractError(f"unknown layer kind {self.kind!r}")

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHT_KINDS

    def __str__(self) -> str:
        if self.block == 0:
            return self.kind
        return f"b{self.block}.{self.kind}"

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        text = text.strip()
        if text in (STEM_KIND, HEAD_KIND):
            return cls(0, text)
        if "." in text:
            blk, kind = text.split(".", 1)
            if blk.startswith("b") and blk[1:].isdigit():
                return cls(int(blk[1:]), kind)
        raise ContractError(f"unparseable layer id {text!r}")


def stem_id() -> LayerId:
    return LayerId(0, STEM_KIND)


def head_id() -> LayerId:
    return LayerId(0, HEAD_KIND)


def block_layer_ids(n_blocks: int) -> list[LayerId]:
    """The 7*L in-block layer ids, in canonical (block, kind) order."""
    return [LayerId(b, k) for b in range(1, n_blocks + 1) for k in BLOCK_KINDS]


def all_layer_ids(n_blocks: int) -> list[LayerId]:
    """Every quantized layer: stem, the in-block sites, head."""
    return [stem_id(), *block_layer_ids(n_blocks), head_id()]
