"""Reverse-mode automatic differentiation on a global tape.

Every operation that participates in differentiation appends a node to the
tape recording its op kind, parent node indices, and a backward closure over
the saved forward values. `backward` replays the tape in reverse from the
loss node and accumulates gradients into the `.grad` buffers of the
requires_grad leaf tensors that fed the graph.

All data is float64. Tensors are immutable after creation except for their
grad buffers, so sharing across evaluation workers is safe; the tape itself
is single-threaded per training step and must be cleared between steps with
`reset_tape`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional

import numpy as np

from . import kernels as K
from .errors import (
    DegenerateInputError,
    DimensionError,
    EmptyBatchError,
    NumericError,
    ValidationError,
)

_TAPE: list = []
_TAPE_GEN = 0
_GRAD_ENABLED = True


class _Node:
    """One tape record: op kind, parent indices, backward closure.

    Leaf nodes (backward_fn is None) carry the tensor whose .grad receives
    the accumulated gradient.
    """

    __slots__ = ("op", "parents", "backward_fn", "leaf")

    def __init__(self, op, parents, backward_fn, leaf=None):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm if perm else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def reset_tape():
    """Drop all tape nodes. Leaf enrollments are invalidated by generation."""
    global _TAPE, _TAPE_GEN
    _TAPE = []
    _TAPE_GEN += 1


def tape_size() -> int:
    return len(_TAPE)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _node_of(t: Tensor) -> Optional[int]:
    """Tape index of t, enrolling requires_grad leaves on first use."""
    if t._node is not None:
        gen, idx = t._node
        if gen == _TAPE_GEN:
            return idx
        t._node = None
    if t.requires_grad:
        idx = len(_TAPE)
        _TAPE.append(_Node("leaf", (), None, leaf=t))
        t._node = (_TAPE_GEN, idx)
        return idx
    return None


def _record(op: str, out: Tensor, inputs, backward_fn: Callable) -> Tensor:
    """Append a node for `out` if any input is on the tape.

    backward_fn(gout) must return one gradient array (or None) per input,
    in order.
    """
    if not _GRAD_ENABLED:
        return out
    parents = tuple(_node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return out
    idx = len(_TAPE)
    _TAPE.append(_Node(op, parents, backward_fn))
    out._node = (_TAPE_GEN, idx)
    return out


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf that `loss` depends on."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node[0] != _TAPE_GEN:
        return
    start = loss._node[1]
    grads: dict = {start: np.ones_like(loss.data)}
    for idx in range(start, -1, -1):
        gout = grads.pop(idx, None)
        if gout is None:
            continue
        node = _TAPE[idx]
        if node.leaf is not None:
            t = node.leaf
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gout
            continue
        for pid, g in zip(node.parents, node.backward_fn(gout)):
            if pid is None or g is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + g
            else:
                grads[pid] = g


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    a_shape, b_shape = a.data.shape, b.data.shape
    return _record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    a_shape, b_shape = a.data.shape, b.data.shape
    return _record(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out_data = a.data / b.data
    out = Tensor(out_data)
    ad, bd = a.data, b.data
    return _record(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * out_data / bd, bd.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", Tensor(-a.data), (a,), lambda g: (-g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of a negative value")
    out_data = np.sqrt(a.data)
    out = Tensor(out_data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out_data,))


# ---------------------------------------------------------------------------
# shape manipulation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    try:
        out_data = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}") from exc

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", Tensor(out_data), (a, b), bwd)


def transpose(a: Tensor, perm=None) -> Tensor:
    if perm is None:
        perm = tuple(reversed(range(a.data.ndim)))
    perm = tuple(perm)
    if sorted(perm) != list(range(a.data.ndim)):
        raise DimensionError(f"invalid transpose axes {perm} for shape {a.shape}")
    inv = tuple(np.argsort(perm))
    out = Tensor(a.data.transpose(perm))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    a_shape = a.data.shape
    return _record("reshape", Tensor(out_data), (a,), lambda g: (g.reshape(a_shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    a_shape = a.data.shape
    return _record(
        "broadcast", Tensor(out_data), (a,), lambda g: (_unbroadcast(g, a_shape),)
    )


def concat(tensors, axis: int = 0) -> Tensor:
    if not tensors:
        raise EmptyBatchError("concat of zero tensors")
    datas = [t.data for t in tensors]
    ref = datas[0].shape
    for d in datas[1:]:
        if len(d.shape) != len(ref) or any(
            i != axis and d.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: "
                f"{[d.shape for d in datas]}"
            )
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bwd(g):
        pieces = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            pieces.append(g[tuple(index)])
            offset += size
        return tuple(pieces)

    return _record("concat", Tensor(out_data), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    for a in axis:
        if not (-ndim <= a < ndim):
            raise DimensionError(f"invalid reduction axis {axis} for ndim {ndim}")
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, a_shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, a_shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    a_shape = a.data.shape
    return _record(
        "sum", out, (a,),
        lambda g: (_expand_reduced(g, a_shape, axes, keepdims),),
    )


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    a_shape = a.data.shape
    return _record(
        "mean", out, (a,),
        lambda g: (_expand_reduced(g, a_shape, axes, keepdims) / count,),
    )


# ---------------------------------------------------------------------------
# neural-net primitives (kernel-backed)

def gelu(a: Tensor) -> Tensor:
    flat = np.ascontiguousarray(a.data.reshape(1, -1))
    out = Tensor(K.gelu_fwd(flat).reshape(a.data.shape))
    a_shape = a.data.shape

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(1, -1))
        return (K.gelu_bwd(flat, gflat).reshape(a_shape),)

    return _record("gelu", out, (a,), bwd)


def _to_2d_lastaxis(data: np.ndarray, axis: int):
    """Move `axis` last and collapse the rest; returns (2d view, restore fn)."""
    moved = np.moveaxis(data, axis, -1)
    moved_shape = moved.shape
    flat = np.ascontiguousarray(moved.reshape(-1, moved_shape[-1]))

    def restore(x2d):
        return np.moveaxis(x2d.reshape(moved_shape), -1, axis)

    return flat, restore


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ndim = a.data.ndim
    if ndim == 0 or not (-ndim <= axis < ndim):
        raise DimensionError(f"invalid softmax axis {axis} for shape {a.shape}")
    axis = axis % ndim
    flat, restore = _to_2d_lastaxis(a.data, axis)
    y2d = K.softmax_fwd(flat)
    out = Tensor(restore(y2d))

    def bwd(g):
        g2d, _ = _to_2d_lastaxis(g, axis)
        return (restore(K.softmax_bwd(y2d, g2d)),)

    return _record("softmax", out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match feature dim {d}"
        )
    if eps <= 0:
        raise ValidationError("layer_norm eps must be positive")
    a_shape = a.data.shape
    x2d = np.ascontiguousarray(a.data.reshape(-1, d))
    y2d, mean_rows, rstd_rows = K.layer_norm_fwd(x2d, gamma.data, beta.data, eps)
    out = Tensor(y2d.reshape(a_shape))
    gamma_data = gamma.data

    def bwd(g):
        g2d = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggamma, gbeta = K.layer_norm_bwd(x2d, gamma_data, mean_rows, rstd_rows, g2d)
        return gx.reshape(a_shape), ggamma, gbeta

    return _record("layer_norm", out, (a, gamma, beta), bwd)


def cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs 2-d logits, got {logits.shape}")
    ids = np.asarray(targets, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"cross_entropy targets length {ids.shape} does not match "
            f"logits rows {logits.data.shape[0]}"
        )
    vocab = logits.data.shape[1]
    live = ids != ignore_id
    if np.any((ids[live] < 0) | (ids[live] >= vocab)):
        raise ValidationError("cross_entropy target id out of range")
    if not np.any(live):
        raise EmptyBatchError("cross_entropy: every position is ignored")
    logits2d = np.ascontiguousarray(logits.data)
    loss, probs, n_kept = K.cross_entropy_fwd(logits2d, ids, ignore_id)
    out = Tensor(loss)

    def bwd(g):
        return (K.cross_entropy_bwd(probs, ids, ignore_id, n_kept, float(g)),)

    return _record("cross_entropy", out, (logits,), bwd)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather from a [vocab, dim] table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if weight.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {weight.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise ValidationError("embedding id out of range")
    out = Tensor(weight.data[idx])
    w_shape = weight.data.shape

    def bwd(g):
        gw = np.zeros(w_shape)
        np.add.at(gw, idx, g)
        return (gw,)

    return _record("embedding", out, (weight,), bwd)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos(a, b) for equal-length vectors; range [0, 2].

    The denominator is sqrt(|a|^2 * |b|^2) computed as one product under one
    square root, which makes dist(a, a) == 0.0 and dist(a, -a) == 2.0 hold
    exactly in floating point.
    """
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise DimensionError(
            f"cosine_distance needs equal-length vectors, got {a.shape} and {b.shape}"
        )
    sa = float(np.dot(a.data, a.data))
    sb = float(np.dot(b.data, b.data))
    if sa == 0.0 or sb == 0.0:
        raise DegenerateInputError("cosine_distance of a zero vector")
    dot = tsum(mul(a, b))
    na2 = tsum(mul(a, a))
    nb2 = tsum(mul(b, b))
    cos = div(dot, sqrt(mul(na2, nb2)))
    return sub(Tensor(1.0), cos)


# ---------------------------------------------------------------------------
# verification harness

def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` takes no arguments and recomputes the scalar loss from the current
    data of `params`; each scalar entry is perturbed in place by ±eps.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    zero_grads(params)
    reset_tape()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    max_err = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            for idx in np.ndindex(p.data.shape):
                saved = p.data[idx]
                p.data[idx] = saved + eps
                lp = f().item()
                p.data[idx] = saved - eps
                lm = f().item()
                p.data[idx] = saved
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NumericError("grad_check: perturbed loss is not finite")
                numeric = (lp - lm) / (2.0 * eps)
                a_val = float(ana[idx])
                err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
                if err > max_err:
                    max_err = err
    reset_tape()
    return max_err
