"""Core differentiable operations on tensors.

Every function computes a numpy result, wraps it in a fresh ``Tensor``,
and registers a backward rule on the active tape.  Backward rules close
over the forward values they need and return one gradient array (or
None) per input, in input order.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, active_selections, record
from .errors import ContractError, DimensionError


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    record((a, b), out, bwd)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    record((x,), out, bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance over ``axes``, then affine."""
    axes = tuple(int(a) for a in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    rank = x.data.ndim
    if any(a < 0 or a >= rank for a in axes):
        raise DimensionError(f"layer_norm axes {axes} out of range for rank {rank}")
    want = tuple(x.shape[a] for a in axes)
    if gamma.shape != want or beta.shape != want:
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} != normalized extents {want}")
    bshape = tuple(x.shape[a] if a in axes else 1 for a in range(rank))
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gb + bb)
    comp = tuple(a for a in range(rank) if a not in axes)

    def bwd(g):
        gg = g * gb
        dx = (gg - gg.mean(axis=axes, keepdims=True)
              - xhat * (gg * xhat).mean(axis=axes, keepdims=True)) * inv
        dgamma = (g * xhat).sum(axis=comp).reshape(gamma.shape) if comp else (g * xhat).reshape(gamma.shape)
        dbeta = g.sum(axis=comp).reshape(beta.shape) if comp else g.reshape(beta.shape)
        return dx, dgamma, dbeta

    record((x, gamma, beta), out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    sel = active_selections()
    if sel is None:
        mask = x.data > 0
        y = np.maximum(x.data, 0)
    else:
        mask = sel.take("relu", lambda: x.data > 0)
        y = np.where(mask, x.data, 0.0) if sel.replaying else np.maximum(x.data, 0)
    out = Tensor(y)

    def bwd(g):
        return (g * mask,)

    record((x,), out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    record((x,), out, bwd)
    return out


def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation kind {kind!r}")


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    record((a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    record((a, b), out, bwd)
    return out


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def bwd(g):
        return (g * c,)

    record((x,), out, bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape {x.shape} -> {shape}: element count mismatch")
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.data.shape),)

    record((x,), out, bwd)
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    rank = x.data.ndim
    axes = tuple(range(rank))[::-1] if axes is None else tuple(int(a) for a in axes)
    if sorted(axes) != list(range(rank)):
        raise DimensionError(f"transpose axes {axes} is not a permutation of rank {rank}")
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    record((x,), out, bwd)
    return out


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts)))

    record(tuple(parts), out, bwd)
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[axis]):
        raise DimensionError(f"slice [{start}:{stop}] out of range on axis {axis} of {x.shape}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    record((x,), out, bwd)
    return out


def split_axis(x: Tensor, axis: int, n_parts: int):
    """Split into ``n_parts`` equal slices along ``axis``."""
    extent = x.shape[axis]
    if extent % n_parts:
        raise DimensionError(f"cannot split extent {extent} into {n_parts} equal parts")
    step = extent // n_parts
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(n_parts)]


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray([x.data.sum()], dtype=x.dtype))

    def bwd(g):
        return (np.full(x.data.shape, g[0], dtype=g.dtype),)

    record((x,), out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def normalize_to_sum(x: Tensor) -> Tensor:
    """Divide by the total so the result sums to one."""
    s = float(x.data.sum())
    if s <= 0:
        raise ContractError("normalize_to_sum needs positive total mass")
    y = x.data / s
    out = Tensor(y)

    def bwd(g):
        return ((g - (g * y).sum()) / s,)

    record((x,), out, bwd)
    return out
