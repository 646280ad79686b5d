"""Dense float64 tensor kernels and a tape-based reverse-mode autodiff engine.

Every operation is a pure function: it computes with numpy, wraps the result
in an immutable :class:`Tensor`, and, when a :class:`Tape` is recording,
appends a node describing the computation. Gradients for every recorded
tensor are obtained by walking the tape in reverse (``backward``), and the
recorded forward pass can be replayed bit-identically (``Tape.replay``),
optionally with selected intermediates overridden.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UsageError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TID = itertools.count()


class Tensor:
    """Immutable dense array of float64 values with shape metadata.

    ``param=True`` marks learnable parameters; relevance propagation treats
    them as transparent (they never absorb relevance) and trainers use the
    flag to find updatable leaves.
    """

    __slots__ = ("data", "tid", "is_param", "name")

    def __init__(self, data, *, param: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.tid = next(_TID)
        self.is_param = param
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for op outputs: freshly computed arrays, no copy/check.
        t = object.__new__(cls)
        out = np.asarray(arr, dtype=np.float64)
        if not out.flags["C_CONTIGUOUS"]:
            out = np.ascontiguousarray(out)  # note: would promote 0-d, but 0-d is always contiguous
        out.setflags(write=False)
        t.data = out
        t.tid = next(_TID)
        t.is_param = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, tid={self.tid}{tag})"


def tensor(data, *, param: bool = False, name: str | None = None) -> Tensor:
    """Create a leaf tensor from array-like data."""
    return Tensor(data, param=param, name=name)


@dataclass
class Node:
    """One recorded primitive: inputs, output, and static op context."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive operations.

    A tape is single-owner while recording (use it as a context manager);
    afterwards it is read-only. Node inputs always precede the node, so a
    single reverse sweep implements the chain rule and a single forward
    sweep replays the computation.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed: set[int] = set()
        self._produced: dict[int, Node] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced[node.output.tid] = node
        for t in node.inputs:
            self._consumed.add(t.tid)

    def is_terminal(self, t: Tensor) -> bool:
        return t.tid in self._produced and t.tid not in self._consumed

    def producer(self, t: Tensor) -> Node | None:
        return self._produced.get(t.tid)

    def replay(self, overrides: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every node in order; returns tid -> value.

        ``overrides`` maps tensor tids to replacement values: after a node
        whose output is overridden is recomputed, the override is installed
        so downstream nodes see the replaced value. Leaf overrides apply
        directly. With no overrides the replay reproduces the recorded
        values bit-identically.
        """
        overrides = dict(overrides or {})
        env: dict[int, np.ndarray] = {}

        def value(t: Tensor) -> np.ndarray:
            if t.tid in env:
                return env[t.tid]
            if t.tid in overrides:
                return np.asarray(overrides[t.tid], dtype=np.float64)
            return t.data
        for node in self.nodes:
            arrays = tuple(value(t) for t in node.inputs)
            out = _OPS[node.op].forward(arrays, node.ctx)
            if node.output.tid in overrides:
                out = np.asarray(overrides[node.output.tid], dtype=np.float64)
            env[node.output.tid] = out
        return env


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@dataclass(frozen=True)
class _Op:
    forward: Callable[[tuple[np.ndarray, ...], dict], np.ndarray]
    vjp: Callable[[np.ndarray, tuple[np.ndarray, ...], np.ndarray, dict], tuple]


def _apply(op: str, inputs: tuple[Tensor, ...], **ctx) -> Tensor:
    arrays = tuple(t.data for t in inputs)
    out = Tensor._wrap(_OPS[op].forward(arrays, ctx))
    tape = active_tape()
    if tape is not None:
        tape._record(Node(op, inputs, out, ctx))
    return out


# ---------------------------------------------------------------------------
# forward kernels and vector-Jacobian products
# ---------------------------------------------------------------------------

def _softmax_arr(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _gelu_arr(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _layernorm_arr(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return xhat * gamma + beta


def _fwd_add(a, ctx):
    return a[0] + a[1]


def _vjp_add(g, a, out, ctx):
    return (g, g)


def _fwd_mul(a, ctx):
    return a[0] * a[1]


def _vjp_mul(g, a, out, ctx):
    return (g * a[1], g * a[0])


def _fwd_scale(a, ctx):
    return a[0] * ctx["c"]


def _vjp_scale(g, a, out, ctx):
    return (g * ctx["c"],)


def _fwd_matmul(a, ctx):
    return a[0] @ a[1]


def _vjp_matmul(g, a, out, ctx):
    x, y = a
    return (g @ y.swapaxes(-1, -2), x.swapaxes(-1, -2) @ g)


def _fwd_linear(a, ctx):
    x, w, b = a
    return x @ w + b


def _vjp_linear(g, a, out, ctx):
    x, w, _ = a
    return (g @ w.T, x.T @ g, g.sum(axis=0))


def _fwd_layernorm(a, ctx):
    return _layernorm_arr(a[0], a[1], a[2], ctx["eps"])


def _vjp_layernorm(g, a, out, ctx):
    x, gamma, _ = a
    eps = ctx["eps"]
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]
    dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
    dbeta = g.reshape(-1, d).sum(axis=0)
    dxhat = g * gamma
    dx = inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return (dx, dgamma, dbeta)


def _fwd_softmax(a, ctx):
    return _softmax_arr(a[0], ctx["axis"])


def _vjp_softmax(g, a, out, ctx):
    axis = ctx["axis"]
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _fwd_log_softmax(a, ctx):
    axis = ctx["axis"]
    shifted = a[0] - np.max(a[0], axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _vjp_log_softmax(g, a, out, ctx):
    axis = ctx["axis"]
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


def _fwd_gelu(a, ctx):
    return _gelu_arr(a[0])


def _vjp_gelu(g, a, out, ctx):
    x = a[0]
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (g * (cdf + x * pdf),)


def _fwd_exp(a, ctx):
    return np.exp(a[0])


def _vjp_exp(g, a, out, ctx):
    return (g * out,)


def _fwd_log(a, ctx):
    return np.log(a[0])


def _vjp_log(g, a, out, ctx):
    return (g / a[0],)


def _fwd_reshape(a, ctx):
    return a[0].reshape(ctx["shape"])


def _vjp_reshape(g, a, out, ctx):
    return (g.reshape(a[0].shape),)


def _fwd_transpose(a, ctx):
    return a[0].transpose(ctx["axes"])


def _vjp_transpose(g, a, out, ctx):
    inverse = np.argsort(ctx["axes"])
    return (g.transpose(tuple(inverse)),)


def _narrow_slices(ctx, ndim):
    sl = [slice(None)] * ndim
    sl[ctx["axis"]] = slice(ctx["start"], ctx["start"] + ctx["length"])
    return tuple(sl)


def _fwd_narrow(a, ctx):
    return a[0][_narrow_slices(ctx, a[0].ndim)]


def _vjp_narrow(g, a, out, ctx):
    dx = np.zeros_like(a[0])
    dx[_narrow_slices(ctx, a[0].ndim)] = g
    return (dx,)


def _fwd_concat(a, ctx):
    return np.concatenate(a, axis=ctx["axis"])


def _vjp_concat(g, a, out, ctx):
    axis = ctx["axis"]
    sizes = [arr.shape[axis] for arr in a]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _fwd_sum(a, ctx):
    return np.asarray(np.sum(a[0]))


def _vjp_sum(g, a, out, ctx):
    return (np.broadcast_to(g, a[0].shape).copy(),)


_OPS: dict[str, _Op] = {
    "add": _Op(_fwd_add, _vjp_add),
    "mul": _Op(_fwd_mul, _vjp_mul),
    "scale": _Op(_fwd_scale, _vjp_scale),
    "matmul": _Op(_fwd_matmul, _vjp_matmul),
    "linear": _Op(_fwd_linear, _vjp_linear),
    "layernorm": _Op(_fwd_layernorm, _vjp_layernorm),
    "softmax": _Op(_fwd_softmax, _vjp_softmax),
    "log_softmax": _Op(_fwd_log_softmax, _vjp_log_softmax),
    "gelu": _Op(_fwd_gelu, _vjp_gelu),
    "exp": _Op(_fwd_exp, _vjp_exp),
    "log": _Op(_fwd_log, _vjp_log),
    "reshape": _Op(_fwd_reshape, _vjp_reshape),
    "transpose": _Op(_fwd_transpose, _vjp_transpose),
    "narrow": _Op(_fwd_narrow, _vjp_narrow),
    "concat": _Op(_fwd_concat, _vjp_concat),
    "sum": _Op(_fwd_sum, _vjp_sum),
}


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    return _apply("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes, got {a.shape} and {b.shape}")
    return _apply("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands or equal-batch 3-D stacks."""
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul batch shapes incompatible: {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul supports 2-D or 3-D pairs, got {a.shape} x {b.shape}")
    return _apply("matmul", (a, b))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for 2-D ``x``."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects 2-D x, 2-D w, 1-D b, got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear shapes inconsistent: {x.shape} @ {w.shape} + {b.shape}")
    return _apply("linear", (x, w, b))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine rescale.

    Uses population (divide-by-N) variance over the feature axis.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return _apply("layernorm", (x, gamma, beta), eps=float(eps))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    return _apply("softmax", (x,), axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log(softmax(x)); never underflows to -inf."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    return _apply("log_softmax", (x,), axis=axis)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU, x * Phi(x), via the error function."""
    return _apply("gelu", (x,))


def exp(x: Tensor) -> Tensor:
    return _apply("exp", (x,))


def log(x: Tensor) -> Tensor:
    return _apply("log", (x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _apply("reshape", (x,), shape=shape)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {x.shape}")
    return _apply("transpose", (x,), axes=axes)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"narrow axis {axis} invalid for shape {x.shape}")
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of bounds for {x.shape}")
    return _apply("narrow", (x,), axis=axis, start=int(start), length=int(length))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat requires at least one tensor")
    return _apply("concat", tuple(parts), axis=int(axis))


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a 0-d scalar tensor."""
    return _apply("sum", (x,))


# ---------------------------------------------------------------------------
# reverse-mode differentiation
# ---------------------------------------------------------------------------

class Gradients:
    """Mapping from recorded tensors to gradient arrays (zeros if untouched)."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.tid)
        return g if g is not None else np.zeros(t.shape)

    def __contains__(self, t: Tensor) -> bool:
        return t.tid in self._grads


def backward(tape: Tape, output: Tensor, seed) -> Gradients:
    """Reverse-mode gradients of ``output`` (weighted by ``seed``) for every
    recorded tensor.

    ``seed`` is an array matching ``output``'s shape (a scalar is accepted
    for 0-d outputs). ``output`` must be a terminal value of the tape.
    """
    if tape.producer(output) is None:
        raise UsageError("backward seed must be a value recorded on this tape")
    if not tape.is_terminal(output):
        raise UsageError("backward seed must be a terminal (unconsumed) value")
    seed_arr = np.asarray(seed, dtype=np.float64)
    if seed_arr.shape != output.shape:
        raise ShapeError(f"seed shape {seed_arr.shape} does not match output {output.shape}")

    grads: dict[int, np.ndarray] = {output.tid: seed_arr}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.tid)
        if g is None:
            continue
        arrays = tuple(t.data for t in node.inputs)
        in_grads = _OPS[node.op].vjp(g, arrays, node.output.data, node.ctx)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = ig if acc is None else acc + ig
    return Gradients(grads)


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        bump = np.zeros_like(xf)
        bump[i] = h
        hi = f((xf + bump).reshape(x.shape))
        lo = f((xf - bump).reshape(x.shape))
        flat[i] = (hi - lo) / (2.0 * h)
    return grad
