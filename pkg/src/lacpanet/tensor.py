"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` whose ``_backward`` closure maps
the upstream gradient to one gradient per parent.  Graph nodes are pure: op
outputs are read-only arrays and parameters are replaced, never mutated.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class EmptyLesionError(ValueError):
    """A mask selects no voxels, so masked average pooling is undefined."""


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=DTYPE)
    out.flags.writeable = False
    return out


class Tensor:
    """N-dimensional float64 array that records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = data if _parents else _frozen(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    data = np.ascontiguousarray(data, dtype=DTYPE)
    data.flags.writeable = False
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    out = Tensor.__new__(Tensor)
    out.data, out.requires_grad, out.grad, out.op = data, False, None, op
    out._parents, out._backward = (), None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """``max(x, slope*x)``; the derivative at exactly 0 is taken to be ``slope``."""
    positive = x.data > 0
    scale = np.where(positive, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out); ``x`` may be 1-D."""
    if x.ndim == 1:
        return reshape(fully_connected(reshape(x, (1, x.shape[0])), weight, bias), (weight.shape[1],))
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} for weight {weight.shape}")
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------- softmax / loss

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax_rows")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``logsumexp(logits) - logits[label]`` for a single 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= int(label) < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    label = int(label)
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def backward_fn(g):
        d = p.copy()
        d[label] -= 1.0
        return (g * d,)

    return _make(np.array(lse - z[label]), (logits,), backward_fn, "cross_entropy")


# ---------------------------------------------------------------- volumetric ops

_TAPS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def _conv_geometry(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, channels_last: bool):
    if stride not in (1, 2):
        raise ValueError(f"conv3d stride must be 1 or 2, got {stride}")
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d input must be 4-D or batched 5-D, got {x.shape}")
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d kernel must be [C_out,C_in,3,3,3], got {kernel.shape}")
    c_in = x.shape[-1] if channels_last else x.shape[-4]
    if kernel.shape[1] != c_in:
        raise ShapeError(f"conv3d: input has {c_in} channels, kernel expects {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv3d: bias {bias.shape} for {kernel.shape[0]} output channels")
    spatial = x.shape[-4:-1] if channels_last else x.shape[-3:]
    if stride == 2 and any(s % 2 for s in spatial):
        raise ShapeError(f"conv3d stride 2 needs even spatial extents, got {spatial}")
    return tuple(s // stride for s in spatial)


def _correlate(xp: np.ndarray, taps: np.ndarray, out_spatial, stride: int) -> np.ndarray:
    """Sum over the 27 taps of shifted ``xp[N,H+2,W+2,D+2,Ci] @ taps[t]``."""
    ho, wo, do = out_spatial
    s = stride
    if taps.shape[1] == 1:
        windows = sliding_window_view(xp[..., 0], (3, 3, 3), axis=(1, 2, 3))[:, ::s, ::s, ::s]
        return (windows.reshape(-1, 27) @ taps[:, 0, :]).reshape(xp.shape[0], ho, wo, do, taps.shape[2])
    out = np.zeros(xp.shape[:1] + (ho, wo, do, taps.shape[2]))
    for t, (i, j, k) in enumerate(_TAPS):
        out += xp[:, i:i + s * ho:s, j:j + s * wo:s, k:k + s * do:s, :] @ taps[t]
    return out


def _scatter_strided(g: np.ndarray, taps: np.ndarray, padded_shape) -> np.ndarray:
    """Adjoint of ``_correlate`` for stride 2: push each output back onto its 27 inputs."""
    n, ho, wo, do, c_out = g.shape
    c_in = taps.shape[1]
    contrib = (g.reshape(-1, c_out) @ taps.transpose(2, 0, 1).reshape(c_out, 27 * c_in))
    contrib = contrib.reshape(n, ho, wo, do, 27, c_in)
    dxp = np.zeros(padded_shape)
    for t, (i, j, k) in enumerate(_TAPS):
        dxp[:, i:i + 2 * ho:2, j:j + 2 * wo:2, k:k + 2 * do:2, :] += contrib[:, :, :, :, t]
    return dxp


def _pad_cl(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, channels_last: bool = False) -> Tensor:
    """Zero-padded 3x3x3 cross-correlation.

    ``x`` is ``[C,H,W,D]`` (or ``[H,W,D,C]`` with ``channels_last``), with an
    optional leading batch axis.  Stride 1 keeps the spatial extent, stride 2
    halves it; output voxel ``i`` is centred on input voxel ``stride*i``.
    """
    out_spatial = _conv_geometry(x, kernel, bias, stride, channels_last)
    batched = x.ndim == 5
    xb = x.data if batched else x.data[None]
    if not channels_last:
        xb = xb.transpose(0, 2, 3, 4, 1)
    c_out, c_in = kernel.shape[:2]
    # taps[t] is the (C_in, C_out) matrix of spatial offset t
    taps = np.ascontiguousarray(kernel.data.reshape(c_out, c_in, 27).transpose(2, 1, 0))
    xp = _pad_cl(xb)
    out = _correlate(xp, taps, out_spatial, stride) + bias.data

    def to_layout(a):
        if not channels_last:
            a = a.transpose(0, 4, 1, 2, 3)
        return a if batched else a[0]

    def from_layout(a):
        a = a if batched else a[None]
        return a if channels_last else a.transpose(0, 2, 3, 4, 1)

    def backward_fn(g):
        gl = np.ascontiguousarray(from_layout(g))
        s = stride
        ho, wo, do = out_spatial
        d_bias = gl.sum(axis=(0, 1, 2, 3)) if bias.requires_grad else None
        d_kernel = None
        if kernel.requires_grad and c_in == 1:
            windows = sliding_window_view(xp[..., 0], (3, 3, 3), axis=(1, 2, 3))[:, ::s, ::s, ::s]
            d_kernel = (gl.reshape(-1, c_out).T @ windows.reshape(-1, 27)).reshape(kernel.shape)
        elif kernel.requires_grad:
            g2 = gl.reshape(-1, c_out)
            d_taps = np.stack([
                xp[:, i:i + s * ho:s, j:j + s * wo:s, k:k + s * do:s, :].reshape(-1, c_in).T @ g2
                for i, j, k in _TAPS
            ])
            d_kernel = d_taps.transpose(2, 1, 0).reshape(kernel.shape)
        d_x = None
        if x.requires_grad:
            if s == 2:
                d_x = _scatter_strided(gl, taps, xp.shape)[:, 1:-1, 1:-1, 1:-1, :]
            else:
                flipped = np.ascontiguousarray(taps[::-1].transpose(0, 2, 1))
                d_x = _correlate(_pad_cl(gl), flipped, xb.shape[1:4], 1)
            d_x = to_layout(d_x)
        return d_x, d_kernel, d_bias

    return _make(to_layout(out), (x, kernel, bias), backward_fn, "conv3d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    """Per-channel normalisation over the spatial axes of one instance.

    Accepts ``[C,H,W,D]`` (``[H,W,D,C]`` with ``channels_last``) and an optional
    leading batch axis; statistics are never pooled across the batch axis.
    """
    if x.ndim not in (4, 5):
        raise ShapeError(f"instance_norm input must be 4-D or batched 5-D, got {x.shape}")
    c = x.shape[-1] if channels_last else x.shape[-4]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine shapes {gamma.shape}, {beta.shape} for {c} channels")
    axes = (-4, -3, -2) if channels_last else (-3, -2, -1)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise ShapeError("instance_norm needs at least two spatial positions")
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    bshape = (c,) if channels_last else (c, 1, 1, 1)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    reduce_axes = tuple(range(x.ndim - 4)) + axes

    def backward_fn(g):
        d_gamma = (g * xhat).sum(axis=reduce_axes).reshape(c) if gamma.requires_grad else None
        d_beta = g.sum(axis=reduce_axes).reshape(c) if beta.requires_grad else None
        d_x = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            d_x = inv_std * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                             - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return d_x, d_gamma, d_beta

    return _make(out, (x, gamma, beta), backward_fn, "instance_norm")


def masked_average_pool(feature: Tensor, mask) -> Tensor:
    """Per-channel mean of ``feature[..., H, W, D, C]`` over voxels where ``mask`` is set.

    ``mask`` has shape ``[..., H, W, D]`` and is treated as a constant.  Any
    leading axes are batch axes pooled independently.
    """
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if feature.ndim < 4 or feature.shape[:-1] != mask.shape:
        raise ShapeError(f"masked_average_pool: feature {feature.shape} vs mask {mask.shape}")
    counts = mask.sum(axis=(-3, -2, -1), keepdims=True)
    if np.any(counts == 0):
        raise EmptyLesionError("lesion mask is empty; masked average pooling is undefined")
    weights = (mask / counts)[..., None]
    out = (feature.data * weights).sum(axis=(-4, -3, -2))
    return _make(out, (feature,), lambda g: (g[..., None, None, None, :] * weights,), "masked_average_pool")


# ---------------------------------------------------------------- backward pass

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ``t`` with ``requires_grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
