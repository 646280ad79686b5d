"""Layer-wise relevance propagation and per-layer importance scores.

Relevance starts as a one-hot on the logits and flows backward through the
recorded tape toward the input patches. Linear layers use the
positive-subset rule (contributions x_j * w_ji restricted to non-negative
pairs, normalized per output); nodes mixing two activations (residual adds,
the two attention matmuls) split relevance by the same rule applied to each
operand and renormalize so the step conserves total relevance exactly.
Parameters never absorb relevance: bias adds, the positional embedding and
the class token are transparent, so the input patches end up holding the
full unit of relevance.

Layer scores follow: per image, a site's score map is the positive part of
gradient (x) relevance at that site's input (head-averaged where a head axis
exists; the attn site uses its post-softmax map); the contribution score C
is the map mean averaged over a seeded sample of images, and importance
I = C / sum(C) over all in-block sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import DegenerateError, DomainError, ShapeError, UsageError
from .layers import BLOCK_KINDS, LayerId, block_layer_ids
from .vit import ActivationRecord, ViTParams, forward


def _pos_neg(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), np.minimum(x, 0.0)


def _safe_ratio(r: np.ndarray, z: np.ndarray) -> np.ndarray:
    # Zero denominators propagate zero relevance instead of blowing up.
    out = np.zeros_like(r)
    np.divide(r, z, out=out, where=z > 0)
    return out


def propagate_linear(x: np.ndarray, w: np.ndarray, r_next: np.ndarray) -> np.ndarray:
    """Positive-subset relevance of a linear layer's input.

    Contributions x_j * w_ji with a non-negative product are normalized per
    output unit and weighted by that output's relevance; the step then
    rescales so the total matches ``r_next`` (outputs whose positive set is
    empty forfeit their relevance to the rescale).
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r_next, dtype=np.float64)
    flat = x.ndim == 1
    x2 = x[None, :] if flat else x
    r2 = r[None, :] if flat else r
    if x2.shape[-1] != w.shape[0] or r2.shape[-1] != w.shape[1] or x2.shape[0] != r2.shape[0]:
        raise ShapeError(f"inconsistent shapes x{x.shape} w{w.shape} r{r_next.shape}")
    xp, xn = _pos_neg(x2)
    wp, wn = _pos_neg(w)
    z = xp @ wp + xn @ wn
    s = _safe_ratio(r2, z)
    out = xp * (s @ wp.T) + xn * (s @ wn.T)
    out = _rescale(out, float(r2.sum()))
    return out[0] if flat else out


def _rescale(raw: np.ndarray, target: float) -> np.ndarray:
    total = float(raw.sum())
    if total <= 0.0:
        return np.zeros_like(raw)
    return raw * (target / total)


def _rescale_pair(ra: np.ndarray, rb: np.ndarray, target: float) -> tuple[np.ndarray, np.ndarray]:
    total = float(ra.sum()) + float(rb.sum())
    if total <= 0.0:
        return np.zeros_like(ra), np.zeros_like(rb)
    c = target / total
    return ra * c, rb * c


def propagate_binary(a: np.ndarray, b: np.ndarray, op: str,
                     r_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split relevance between two activation operands of add/matmul/mul.

    Each operand receives the positive-subset rule with the other operand as
    its weight; a final joint renormalization restores exact conservation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = np.asarray(r_next, dtype=np.float64)
    target = float(r.sum())
    if op == "add":
        ap, bp = np.maximum(a, 0.0), np.maximum(b, 0.0)
        s = _safe_ratio(r, ap + bp)
        return _rescale_pair(ap * s, bp * s, target)
    if op == "mul":
        prod_pos = np.maximum(a * b, 0.0)
        s = _safe_ratio(r, prod_pos)
        share = prod_pos * s  # r where the product is positive
        return _rescale_pair(share, share.copy(), target)
    if op == "matmul":
        ap, an = _pos_neg(a)
        bp, bn = _pos_neg(b)
        z = ap @ bp + an @ bn
        s = _safe_ratio(r, z)
        ra = ap * (s @ bp.swapaxes(-1, -2)) + an * (s @ bn.swapaxes(-1, -2))
        rb = bp * (ap.swapaxes(-1, -2) @ s) + bn * (an.swapaxes(-1, -2) @ s)
        return _rescale_pair(ra, rb, target)
    raise UsageError(f"propagate_binary does not handle op {op!r}")


_PASS_THROUGH_OPS = {"layernorm", "softmax", "log_softmax", "gelu", "exp", "log", "scale"}


def _walk(tape: T.Tape, logits: T.Tensor, seed: np.ndarray) -> tuple[dict[int, np.ndarray], list[tuple[str, float]]]:
    rel: dict[int, np.ndarray] = {logits.tid: seed}
    drift: list[tuple[str, float]] = []

    def emit(t: T.Tensor, r: np.ndarray) -> float:
        if t.is_param:
            return 0.0
        acc = rel.get(t.tid)
        rel[t.tid] = r if acc is None else acc + r
        return float(r.sum())

    for node in reversed(tape.nodes):
        # Reverse topological order: every consumer has already deposited its
        # share, so the output's relevance is final (and kept for retrieval).
        r = rel.get(node.output.tid)
        if r is None:
            continue
        op = node.op
        inputs = node.inputs
        total_in = float(r.sum())
        emitted = 0.0

        if op in _PASS_THROUGH_OPS:
            emitted = emit(inputs[0], r)
        elif op == "linear":
            x, w, _ = inputs
            emitted = emit(x, propagate_linear(x.data, w.data, r))
        elif op in ("add", "mul", "matmul"):
            a, b = inputs
            if a.is_param and b.is_param:
                emitted = total_in  # nothing to do; treat as settled
            elif b.is_param and op in ("add", "mul"):
                emitted = emit(a, r)
            elif a.is_param and op in ("add", "mul"):
                emitted = emit(b, r)
            else:
                ra, rb = propagate_binary(a.data, b.data, op, r)
                if a.is_param:
                    emitted = emit(b, _rescale(rb, total_in))
                elif b.is_param:
                    emitted = emit(a, _rescale(ra, total_in))
                else:
                    emitted = emit(a, ra) + emit(b, rb)
        elif op == "reshape":
            emitted = emit(inputs[0], r.reshape(inputs[0].shape))
        elif op == "transpose":
            inverse = tuple(np.argsort(node.ctx["axes"]))
            emitted = emit(inputs[0], r.transpose(inverse))
        elif op == "narrow":
            scattered = np.zeros(inputs[0].shape)
            sl = [slice(None)] * scattered.ndim
            sl[node.ctx["axis"]] = slice(node.ctx["start"], node.ctx["start"] + node.ctx["length"])
            scattered[tuple(sl)] = r
            emitted = emit(inputs[0], scattered)
        elif op == "concat":
            axis = node.ctx["axis"]
            sizes = [t.shape[axis] for t in inputs]
            pieces = np.split(r, np.cumsum(sizes)[:-1], axis=axis)
            kept = [(t, piece) for t, piece in zip(inputs, pieces) if not t.is_param]
            kept_total = sum(float(p.sum()) for _, p in kept)
            if kept_total > 0.0:
                factor = total_in / kept_total if len(kept) < len(inputs) else 1.0
                for t, piece in kept:
                    emitted += emit(t, piece * factor)
        elif op == "sum":
            xp = np.maximum(inputs[0].data, 0.0)
            z = float(xp.sum())
            share = xp * (float(r) / z) if z > 0 else np.zeros_like(xp)
            emitted = emit(inputs[0], _rescale(share, total_in))
        else:  # pragma: no cover - every primitive is handled above
            raise UsageError(f"no relevance rule for op {op!r}")

        drift.append((op, abs(emitted - total_in)))
    return rel, drift


@dataclass
class RelevanceState:
    """Relevance and gradients for every recorded tensor of one forward pass."""

    class_index: int
    relevance: dict[int, np.ndarray]
    gradients: T.Gradients
    record: ActivationRecord
    logits: np.ndarray
    step_drift: list[tuple[str, float]]

    def relevance_of(self, t: T.Tensor) -> np.ndarray:
        r = self.relevance.get(t.tid)
        return r if r is not None else np.zeros(t.shape)

    def input_relevance(self) -> np.ndarray:
        """Relevance landed on the input patch tokens."""
        return self.relevance_of(self.record.patch_tokens)

    def max_step_drift(self) -> float:
        return max((d for _, d in self.step_drift), default=0.0)


def lrp_run(params: ViTParams, image: np.ndarray, class_index: int) -> RelevanceState:
    """Propagate relevance and gradients for ``class_index`` through one image."""
    cfg = params.config
    if not 0 <= class_index < cfg.classes:
        raise DomainError(f"class {class_index} outside [0, {cfg.classes})")
    logits, record, tape = forward(params, image, hooks=True)
    seed = np.zeros(cfg.classes)
    seed[class_index] = 1.0
    grads = T.backward(tape, logits, seed)
    rel, drift = _walk(tape, logits, seed)
    return RelevanceState(class_index, rel, grads, record, logits.data, drift)


def relevance_map(grad_attn: np.ndarray, rel_attn: np.ndarray) -> np.ndarray:
    """Positive part of gradient (x) relevance, averaged across heads."""
    grad_attn = np.asarray(grad_attn, dtype=np.float64)
    rel_attn = np.asarray(rel_attn, dtype=np.float64)
    if grad_attn.shape != rel_attn.shape or grad_attn.ndim != 3:
        raise ShapeError(
            f"expected matching heads x N x N arrays, got {grad_attn.shape} and {rel_attn.shape}"
        )
    return np.maximum(grad_attn * rel_attn, 0.0).mean(axis=0)


def _site_score(grad: np.ndarray, rel: np.ndarray) -> float:
    m = np.maximum(grad * rel, 0.0)
    if m.ndim == 3:  # head axis present
        m = m.mean(axis=0)
    return float(m.mean())


def _image_scores(state: RelevanceState, n_blocks: int) -> dict[LayerId, float]:
    scores: dict[LayerId, float] = {}
    for lid in block_layer_ids(n_blocks):
        if lid.kind == "attn":
            a = state.record.attention[lid.block]
            scores[lid] = float(
                relevance_map(state.gradients[a], state.relevance_of(a)).mean()
            )
        else:
            values = [
                _site_score(state.gradients[t], state.relevance_of(t))
                for t in state.record.inputs[lid]
            ]
            scores[lid] = float(np.mean(values))
    return scores


def contribution_scores(params: ViTParams, dataset, t_samples: int, seed: int,
                        class_source: str = "label") -> dict[LayerId, float]:
    """Average per-layer score-map means over a seeded sample of images.

    Relevance is seeded on each image's ground-truth label by default;
    ``class_source="predicted"`` seeds on the model's own prediction. The
    per-image score vectors are folded in a canonical (value-sorted) order
    so the result depends only on the sampled set, not on dataset ordering.
    """
    if class_source not in ("label", "predicted"):
        raise UsageError(f"class_source must be 'label' or 'predicted', got {class_source!r}")
    images, labels = np.asarray(dataset.images), np.asarray(dataset.labels)
    if t_samples < 1:
        raise UsageError("t_samples must be >= 1")
    if t_samples > len(images):
        raise UsageError(f"t_samples {t_samples} exceeds dataset size {len(images)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(images), size=t_samples, replace=False)

    layer_ids = block_layer_ids(params.config.blocks)
    rows = np.empty((t_samples, len(layer_ids)))
    for row, idx in enumerate(chosen):
        if class_source == "predicted":
            from .vit import predict_logits
            target = int(predict_logits(params, images[idx]).argmax())
        else:
            target = int(labels[idx])
        state = lrp_run(params, images[idx], target)
        scores = _image_scores(state, params.config.blocks)
        rows[row] = [scores[lid] for lid in layer_ids]
    # canonical fold order -> exact set semantics
    rows = rows[np.lexsort(rows.T[::-1])]
    means = rows.mean(axis=0)
    return {lid: float(c) for lid, c in zip(layer_ids, means)}


@dataclass(frozen=True)
class ImportanceTable:
    """Per-layer contribution scores C and normalized importance scores I."""

    contributions: dict[LayerId, float]
    importance: dict[LayerId, float]
    samples: int

    def to_text(self) -> str:
        lines = [f"# importance-table v1 T={self.samples}"]
        for lid in sorted(self.contributions, key=lambda l: (l.block, BLOCK_KINDS.index(l.kind))):
            lines.append(f"{lid} {self.contributions[lid]!r} {self.importance[lid]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ImportanceTable":
        samples = 0
        contributions: dict[LayerId, float] = {}
        importance: dict[LayerId, float] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line.split():
                    if token.startswith("T="):
                        samples = int(token[2:])
                continue
            lid_text, c_text, i_text = line.split()
            lid = LayerId.parse(lid_text)
            contributions[lid] = float(c_text)
            importance[lid] = float(i_text)
        if not contributions:
            raise DegenerateError("importance table is empty")
        return cls(contributions, importance, samples)


def importance_scores(contributions: Mapping[LayerId, float], samples: int = 0) -> ImportanceTable:
    """Normalize contribution scores so the importance values sum to one."""
    if any(c < 0 for c in contributions.values()):
        raise DegenerateError("contribution scores must be non-negative")
    total = float(sum(contributions.values()))
    if total <= 0.0:
        raise DegenerateError("all contribution scores are zero")
    importance = {lid: c / total for lid, c in contributions.items()}
    return ImportanceTable(dict(contributions), importance, samples)
