"""Per-layer bit-width allocation under a model-size budget.

Three modes:

* ``uniform`` — every layer at the base width.
* ``paper`` — the fixed per-block recipe: all layers of the first
  ``boost_blocks`` blocks gain one bit; in each later block the
  ``boost_blocks`` least-important weight layers lose ``demote_depth`` bits.
  The size budget is not enforced here (at small depths the per-block
  demotion count cannot pay for the boost).
* ``greedy`` — boost the first blocks, then demote weight layers of the
  later blocks in ascending importance-per-parameter order until the total
  weighted model size is back at (or below) the uniform baseline.

Activation-only sites (matmul1/attn/matmul2) carry activation bits only and
follow the modal weight width of their block (ties resolve upward).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping

from .errors import AllocationError, ConfigError, ContractError
from .layers import (
    ACTIVATION_ONLY_KINDS,
    BLOCK_KINDS,
    KIND_ORDER,
    LayerId,
    all_layer_ids,
    head_id,
    stem_id,
)

UNIFORM_MODE = "uniform"
PAPER_MODE = "paper"
GREEDY_MODE = "greedy"
MODES = (UNIFORM_MODE, PAPER_MODE, GREEDY_MODE)

DEMOTABLE_KINDS = ("qkv", "proj", "fc1", "fc2")


@dataclass(frozen=True)
class BitAllocation:
    """Weight/activation bit widths per layer; weight bits are None for
    activation-only sites."""

    mode: str
    entries: dict[LayerId, tuple[int | None, int]]

    def __post_init__(self):
        for lid, (wb, ab) in self.entries.items():
            if lid.has_weights:
                if wb is None or wb < 2:
                    raise ContractError(f"{lid}: weight-bearing layers need weight bits >= 2")
            elif wb is not None:
                raise ContractError(f"{lid}: activation-only layers carry no weight bits")
            if ab < 1:
                raise ContractError(f"{lid}: activation bits must be >= 1")

    def weight_bits(self, lid: LayerId) -> int | None:
        return self.entries[lid][0]

    def act_bits(self, lid: LayerId) -> int:
        return self.entries[lid][1]

    def covers(self, layer_ids) -> bool:
        return all(lid in self.entries for lid in layer_ids)

    def to_text(self) -> str:
        lines = [f"# bit-allocation v1 mode={self.mode}"]
        for lid in sorted(self.entries, key=_layer_sort_key):
            wb, ab = self.entries[lid]
            lines.append(f"{lid} {'-' if wb is None else wb} {ab}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BitAllocation":
        mode = "unknown"
        entries: dict[LayerId, tuple[int | None, int]] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line.split():
                    if token.startswith("mode="):
                        mode = token[5:]
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ContractError(f"unparseable allocation line {line!r}")
            lid = LayerId.parse(parts[0])
            wb = None if parts[1] == "-" else int(parts[1])
            entries[lid] = (wb, int(parts[2]))
        if not entries:
            raise ContractError("allocation table is empty")
        return cls(mode, entries)


def _layer_sort_key(lid: LayerId) -> tuple:
    if lid.kind == "patch_embed":
        return (-1, 0)
    if lid.kind == "head":
        return (10 ** 9, 0)
    return (lid.block, KIND_ORDER[lid.kind])


def model_size_bits(alloc: BitAllocation, weight_counts: Mapping[LayerId, int]) -> int:
    """Exact weighted model size: sum over weight-bearing layers of
    parameter count times weight bits."""
    total = 0
    for lid, count in weight_counts.items():
        if lid not in alloc.entries:
            raise AllocationError(f"allocation does not cover layer {lid}")
        wb = alloc.weight_bits(lid)
        if wb is None:
            raise AllocationError(f"layer {lid} carries no weight bits")
        total += count * wb
    return total


def uniform_allocation(base_bits: int, n_blocks: int) -> BitAllocation:
    entries = {}
    for lid in all_layer_ids(n_blocks):
        entries[lid] = (base_bits if lid.has_weights else None, base_bits)
    return BitAllocation(UNIFORM_MODE, entries)


def _modal_width(widths: list[int]) -> int:
    counts = Counter(widths)
    best = max(counts.values())
    return max(w for w, c in counts.items() if c == best)


def _finalize(mode: str, weight_bits: dict[LayerId, int], n_blocks: int,
              boost_blocks: int, base_bits: int) -> BitAllocation:
    entries: dict[LayerId, tuple[int | None, int]] = {}
    entries[stem_id()] = (base_bits, base_bits)
    entries[head_id()] = (base_bits, base_bits)
    for block in range(1, n_blocks + 1):
        block_widths = [weight_bits[LayerId(block, k)] for k in DEMOTABLE_KINDS]
        modal = _modal_width(block_widths)
        for kind in BLOCK_KINDS:
            lid = LayerId(block, kind)
            if kind in ACTIVATION_ONLY_KINDS:
                entries[lid] = (None, base_bits + 1 if block <= boost_blocks else modal)
            else:
                wb = weight_bits[lid]
                entries[lid] = (wb, wb)
    return BitAllocation(mode, entries)


def _check_mixed_preconditions(base_bits: int, n_blocks: int, boost_blocks: int,
                               demote_depth: int) -> None:
    if base_bits - demote_depth < 2:
        raise ConfigError(
            f"mixed modes need base bits >= {2 + demote_depth} (demotion floor 2), got {base_bits}"
        )
    if n_blocks < 3:
        raise ConfigError(f"mixed modes need at least 3 blocks, got {n_blocks}")
    if not 1 <= boost_blocks < n_blocks:
        raise ConfigError(f"boost_blocks must be in [1, {n_blocks - 1}], got {boost_blocks}")


def _validated_importance(importance: Mapping[LayerId, float], n_blocks: int) -> dict[LayerId, float]:
    out = {}
    for block in range(1, n_blocks + 1):
        for kind in BLOCK_KINDS:
            lid = LayerId(block, kind)
            if lid not in importance:
                raise AllocationError(f"importance table missing layer {lid}")
            out[lid] = float(importance[lid])
    return out


def allocate_bits(importance: Mapping[LayerId, float] | None, base_bits: int, mode: str,
                  weight_counts: Mapping[LayerId, int], boost_blocks: int = 2,
                  demote_depth: int = 1) -> BitAllocation:
    """Build a BitAllocation from normalized layer-importance scores.

    ``weight_counts`` maps every weight-bearing LayerId to its weight
    parameter count (see ``vit.weight_counts``); block structure is derived
    from it. ``importance`` may be None for uniform mode.
    """
    n_blocks = max(lid.block for lid in weight_counts)
    if mode == UNIFORM_MODE:
        return uniform_allocation(base_bits, n_blocks)
    if mode not in MODES:
        raise ConfigError(f"unknown allocation mode {mode!r}")
    _check_mixed_preconditions(base_bits, n_blocks, boost_blocks, demote_depth)
    if importance is None:
        raise AllocationError(f"{mode} mode requires an importance table")
    scores = _validated_importance(importance, n_blocks)

    weight_bits = {}
    for block in range(1, n_blocks + 1):
        for kind in DEMOTABLE_KINDS:
            weight_bits[LayerId(block, kind)] = (
                base_bits + 1 if block <= boost_blocks else base_bits
            )

    if mode == PAPER_MODE:
        # Demote as many layers per later block as blocks were boosted.
        for block in range(boost_blocks + 1, n_blocks + 1):
            ranked = sorted(
                (LayerId(block, k) for k in DEMOTABLE_KINDS),
                key=lambda lid: (scores[lid], KIND_ORDER[lid.kind]),
            )
            for lid in ranked[:boost_blocks]:
                weight_bits[lid] = base_bits - demote_depth
        return _finalize(PAPER_MODE, weight_bits, n_blocks, boost_blocks, base_bits)

    # greedy: demote cheapest importance-per-parameter layers until the
    # boost is paid for.
    baseline = sum(count * base_bits for count in weight_counts.values())
    size = baseline + sum(
        weight_counts[LayerId(b, k)]
        for b in range(1, boost_blocks + 1) for k in DEMOTABLE_KINDS
    )
    candidates = sorted(
        (LayerId(b, k) for b in range(boost_blocks + 1, n_blocks + 1) for k in DEMOTABLE_KINDS),
        key=lambda lid: (scores[lid] / weight_counts[lid], lid.block, KIND_ORDER[lid.kind]),
    )
    for lid in candidates:
        if size <= baseline:
            break
        weight_bits[lid] = base_bits - demote_depth
        size -= weight_counts[lid] * demote_depth
    if size > baseline:
        raise AllocationError(
            f"size budget unattainable: {size - baseline} bits over the uniform baseline "
            f"after demoting all {len(candidates)} candidate layers"
        )
    return _finalize(GREEDY_MODE, weight_bits, n_blocks, boost_blocks, base_bits)
