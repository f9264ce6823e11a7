"""Differentiable primitives.

Every function takes and returns ``Tensor`` objects (integer index arrays and
boolean masks stay plain numpy) and checks shapes before computing.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from .tensor import Tensor, add, make_node, mul, neg, unbroadcast

__all__ = [
    "add",
    "mul",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "embedding",
    "scatter_rows",
    "softmax",
    "log_softmax",
    "layer_norm",
    "relu",
    "dropout",
    "masked_fill",
    "cross_entropy",
    "exp",
    "log",
]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ValueError("mean over an empty axis")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None)."""
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if not (part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice))):
            raise TypeError("only basic slicing is differentiable; use embedding() for gathers")
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(np.array(out), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat shape mismatch on axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, tensors, backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` (V x d) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ValueError(f"embedding weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_node(out, (weight,), backward)


def scatter_rows(base: Tensor, index: tuple[np.ndarray, ...], values: Tensor) -> Tensor:
    """Return ``base`` with the vectors at ``index`` replaced by rows of ``values``.

    ``index`` selects leading positions of ``base`` (for a B x L x d tensor,
    a pair of (batch, position) arrays).  Positions must be unique.
    """
    index = tuple(np.asarray(i, dtype=np.int64) for i in index)
    lead = base.shape[: len(index)]
    expected = (len(index[0]),) + base.shape[len(index):]
    if values.shape != expected:
        raise ValueError(f"scatter_rows values shape {values.shape} != {expected}")
    flat = np.ravel_multi_index(index, lead) if len(index[0]) else np.zeros(0, dtype=np.int64)
    if len(np.unique(flat)) != len(flat):
        raise ValueError("scatter_rows positions must be unique")
    out = base.data.copy()
    out[index] = values.data

    def backward(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[index] = 0
        return gb, g[index]

    return make_node(out, (base, values), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxhat = g * weight.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gw, gb

    return make_node(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_node(out, (x,), lambda g: (g * (out > 0),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout.  Callers skip this entirely outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    scale = x.data.dtype.type(1.0 / (1.0 - p))
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * scale
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    """Set entries where ``mask`` is True to ``value`` (an additive -inf mask by default)."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ValueError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask, x.data.dtype.type(value), x.data)
    return make_node(out, (x,), lambda g: (unbroadcast(np.where(mask, 0, g), x.shape),))


def cross_entropy(
    logits: Tensor, labels: np.ndarray, smoothing: float = 0.0, ignore_id: int | None = None
) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-ignored positions.

    ``logits`` has shape (..., V) and ``labels`` the leading shape.  The smoothed
    target puts ``1 - smoothing`` on the gold label and spreads ``smoothing``
    uniformly over all V classes.
    """
    labels = np.asarray(labels)
    vocab = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    flat_logits = logits.data.reshape(-1, vocab)
    flat_labels = labels.reshape(-1)
    valid = np.ones(flat_labels.shape, dtype=bool) if ignore_id is None else flat_labels != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no target positions")
    if np.any(flat_labels[valid] < 0) or np.any(flat_labels[valid] >= vocab):
        raise IndexError(f"label out of range [0, {vocab})")
    rows = np.nonzero(valid)[0]
    gold = flat_labels[rows]
    sub = flat_logits[rows]
    shifted = sub - sub.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(len(rows)), gold]
    loss = nll.sum()
    if smoothing:
        loss = (1.0 - smoothing) * loss + smoothing * (-logp.mean(axis=-1)).sum()
    value = np.asarray(loss / count, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(len(rows)), gold] -= 1.0 - smoothing
        if smoothing:
            probs -= smoothing / vocab
        full = np.zeros_like(flat_logits)
        full[rows] = probs * (g / count)
        return (full.reshape(logits.shape),)

    return make_node(value, (logits,), backward)


def check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {name}")

