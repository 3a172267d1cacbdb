"""Dense N-d tensors with reverse-mode automatic differentiation.

Training runs in float32. Gradient checking builds float64 tensors instead
(pass float64 arrays in); every op preserves the dtype of its inputs, so the
same graph code serves both modes. There is no implicit broadcasting: shapes
must match exactly except where an op documents otherwise (`mul_broadcast`,
per-channel bias/affine terms inside `conv2d` and `batch_norm`).
"""

from __future__ import annotations

import struct
import threading

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands with incompatible shapes or dtypes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (double backward, bad custom gradient, ...)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d to 1-d, so guard on the flag.
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


def _as_array(data, dtype):
    if dtype is not None:
        arr = np.asarray(data, dtype=np.dtype(dtype))
    elif isinstance(data, np.ndarray) and data.dtype in SUPPORTED_DTYPES:
        arr = data
    else:
        arr = np.asarray(data, dtype=np.float32)
    return _contig(arr)


class Tensor:
    """A contiguous row-major float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in SUPPORTED_DTYPES:
            raise ShapeError(f"unsupported dtype {self.data.dtype}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        Graph(self).backward()

    # Small operator sugar; python scalars go through the scalar ops so no
    # implicit array broadcasting sneaks in.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


class Node:
    """One recorded operation: parent tensors plus the backward closure.

    The closure receives the upstream gradient array and returns one gradient
    array (or None) per parent, in order.
    """

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


def _record(out_data, inputs, backward_fn, name):
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        out.node = Node(tuple(inputs), backward_fn, name)
    return out


class Graph:
    """Reverse-topological view of the recorded ops behind a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in visited or t.node is None:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))

    def backward(self):
        root = self.root
        if root._backward_done:
            raise GraphError("backward() called twice on the same graph; re-run the forward pass first")
        if root.data.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        root._backward_done = True
        root.grad = np.ones_like(root.data)
        for t in reversed(self.nodes):
            node = t.node
            grads = node.backward_fn(t.grad)
            if len(grads) != len(node.inputs):
                raise GraphError(f"{node.name}: backward returned {len(grads)} gradients for {len(node.inputs)} inputs")
            for parent, g in zip(node.inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g)
                if g.shape != parent.data.shape:
                    raise GraphError(
                        f"{node.name}: gradient shape {g.shape} does not match input shape {parent.data.shape}")
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _record(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _record(a.data + s, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Outer-broadcast multiply: equal rank, every axis equal or 1 on one side."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"mul_broadcast: rank {a.data.ndim} vs {b.data.ndim}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"mul_broadcast: dtype {a.data.dtype} vs {b.data.dtype}")
    for da, db in zip(a.data.shape, b.data.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"mul_broadcast: shape {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        ax_a = tuple(i for i, (da, db) in enumerate(zip(ad.shape, g.shape)) if da == 1 and db != 1)
        ax_b = tuple(i for i, (db_, dg) in enumerate(zip(bd.shape, g.shape)) if db_ == 1 and dg != 1)
        if ax_a:
            ga = ga.sum(axis=ax_a, keepdims=True)
        if ax_b:
            gb = gb.sum(axis=ax_b, keepdims=True)
        return ga, gb

    return _record(ad * bd, (a, b), backward, "mul_broadcast")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = _contig(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _contig(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (_contig(g.transpose(inv)),), "permute")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"concat: dtype {t.data.dtype} vs {dt}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            _contig(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic slicing with a tuple of `slice` objects."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, slice):
            raise ShapeError("slice_: only slice objects are supported")
    out = _contig(a.data[index])
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(out, (a,), backward, "slice")


def _reduce(a: Tensor, axis, keepdims, op_name, forward, grad_factor):
    ad = a.data
    if axis is None:
        axes = tuple(range(ad.ndim))
    elif isinstance(axis, int):
        axes = (axis % ad.ndim,)
    else:
        axes = tuple(ax % ad.ndim for ax in axis)
    out = forward(ad, axes)
    if not keepdims and out.ndim == ad.ndim:
        out = _contig(np.squeeze(out, axis=axes))

    def backward(g):
        gk = g
        if not keepdims:
            gk = np.expand_dims(g, axes)
        return (np.broadcast_to(gk, ad.shape).astype(ad.dtype) * grad_factor,)

    return _record(out, (a,), backward, op_name)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axis, keepdims, "sum",
                   lambda x, axes: np.add.reduce(x, axis=axes, keepdims=True), a.data.dtype.type(1))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    if axis is None:
        n = ad.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([ad.shape[ax % ad.ndim] for ax in axes]))
    return _reduce(a, axis, keepdims, "mean",
                   lambda x, axes: np.mean(x, axis=axes, keepdims=True, dtype=x.dtype),
                   ad.dtype.type(1.0 / n))


def softmax(a: Tensor, axis: int) -> Tensor:
    ad = a.data
    axis = axis % ad.ndim
    shifted = ad - np.max(ad, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), backward, "softmax")


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if dtype not in SUPPORTED_DTYPES:
        raise ShapeError(f"cast: unsupported dtype {dtype}")
    src = a.data.dtype
    return _record(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")


def cumsum0(a: Tensor) -> Tensor:
    """Cumulative sum along axis 0, in the tensor's own dtype."""
    out = np.cumsum(a.data, axis=0)

    def backward(g):
        return (np.ascontiguousarray(np.flip(np.cumsum(np.flip(g, axis=0), axis=0), axis=0)),)

    return _record(out, (a,), backward, "cumsum0")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a (N, ...) tensor by an integer index array."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: index must be a 1-d integer array")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _record(_contig(a.data[idx]), (a,), backward, "gather_rows")


def scatter_rows(a: Tensor, idx, num_rows: int) -> Tensor:
    """Place rows of a (M, ...) tensor into a zero (num_rows, ...) tensor.

    Indices must be unique; duplicate targets are the caller's bug.
    """
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"scatter_rows: index shape {idx.shape} vs {a.data.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + a.data.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return _record(out, (a,), lambda g: (_contig(g[idx]),), "scatter_rows")


def rot90_spatial(a: Tensor, k: int = 1) -> Tensor:
    """Rotate the last two axes by k quarter turns."""
    out = np.ascontiguousarray(np.rot90(a.data, k=k, axes=(-2, -1)))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(np.rot90(g, k=-k, axes=(-2, -1))),), "rot90")


# ---------------------------------------------------------------------------
# conv / upsampling / normalization


def _conv_view(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    b, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, ho, wo, kh, kw), (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation over (B, C, H, W) with optional per-channel bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input shape {x.data.shape}, kernel shape {kernel.data.shape}; both must be 4-d")
    b, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input shape {x.data.shape} has {cin} channels but kernel shape "
                         f"{kernel.data.shape} expects {kcin}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError(f"conv2d: dtype {x.data.dtype} vs {kernel.data.dtype}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} vs ({cout},)")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    view = _conv_view(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(view, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    kd = kernel.data

    def backward(g):
        gk = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, Cin)
                gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if bias is not None:
            return np.ascontiguousarray(gx), gk, gb
        return np.ascontiguousarray(gx), gk

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, backward, "conv2d")


def _up2_nearest_axis(x, axis):
    return np.repeat(x, 2, axis=axis)


def upsample_nearest2x(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected 4-d, got {a.data.shape}")
    b, c, h, w = a.data.shape
    out = np.ascontiguousarray(_up2_nearest_axis(_up2_nearest_axis(a.data, 2), 3))

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (a,), backward, "upsample_nearest2x")


def _bilinear2x_weights(n, dtype):
    # Output sample r sits at source coordinate (r + 0.5)/2 - 0.5; clamped edges.
    r = np.arange(2 * n)
    src = (r + 0.5) / 2.0 - 0.5
    f = np.floor(src).astype(np.int64)
    frac = (src - f).astype(dtype)
    i0 = np.clip(f, 0, n - 1)
    i1 = np.clip(f + 1, 0, n - 1)
    return i0, i1, (1.0 - frac).astype(dtype), frac


def _up2_bilinear_axis(x, axis):
    n = x.shape[axis]
    i0, i1, w0, w1 = _bilinear2x_weights(n, x.dtype)
    xm = np.moveaxis(x, axis, 0)
    out = xm[i0] * w0.reshape((-1,) + (1,) * (xm.ndim - 1)) + xm[i1] * w1.reshape((-1,) + (1,) * (xm.ndim - 1))
    return np.moveaxis(out, 0, axis)


def _up2_bilinear_axis_backward(g, axis, n):
    i0, i1, w0, w1 = _bilinear2x_weights(n, g.dtype)
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, i0, gm * w0.reshape((-1,) + (1,) * (gm.ndim - 1)))
    np.add.at(out, i1, gm * w1.reshape((-1,) + (1,) * (gm.ndim - 1)))
    return np.moveaxis(out, 0, axis)


def upsample_bilinear2x(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x: expected 4-d, got {a.data.shape}")
    h, w = a.data.shape[2:]
    out = np.ascontiguousarray(_up2_bilinear_axis(_up2_bilinear_axis(a.data, 2), 3))

    def backward(g):
        gw = _up2_bilinear_axis_backward(g, 3, w)
        return (np.ascontiguousarray(_up2_bilinear_axis_backward(gw, 2, h)),)

    return _record(out, (a,), backward, "upsample_bilinear2x")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization over (B, C, H, W).

    Training normalizes with batch statistics and updates the running buffers
    in place; eval normalizes with the running averages.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected 4-d, got {x.data.shape}")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.data.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.data.shape} vs ({c},)")
    xd = x.data
    dt = xd.dtype
    if training:
        mu = xd.mean(axis=(0, 2, 3), dtype=dt)
        var = xd.var(axis=(0, 2, 3), dtype=dt)
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            gx = (inv_std.reshape(1, c, 1, 1) / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        else:
            gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return np.ascontiguousarray(gx), ggamma, gbeta, None, None

    return _record(out, (x, gamma, beta, running_mean, running_var), backward, "batch_norm")


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.abs(x))) * (x >= 0) + np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))) * (x < 0)


def weighted_bce_with_logits(logits: Tensor, target: Tensor, positive_weight: float) -> Tensor:
    """Mean of pw*t*softplus(-x) + (1-t)*softplus(x); targets must be exactly 0/1."""
    _check_same(logits, target, "weighted_bce_with_logits")
    td = target.data
    if not np.all((td == 0) | (td == 1)):
        raise ValueError("weighted_bce_with_logits: targets must be binary 0/1")
    xd = logits.data
    pw = xd.dtype.type(positive_weight)
    elems = pw * td * _softplus(-xd) + (1.0 - td) * _softplus(xd)
    out = np.asarray(elems.mean(dtype=xd.dtype))
    n = xd.dtype.type(xd.size)

    def backward(g):
        gx = g * (-pw * td * _sigmoid(-xd) + (1.0 - td) * _sigmoid(xd)) / n
        return gx.astype(xd.dtype), None

    return _record(out, (logits, target), backward, "weighted_bce_with_logits")


# ---------------------------------------------------------------------------
# custom-op extension point


class OpContext:
    """Free-form stash for values the forward pass saves for the backward pass."""


def register_custom_op(name: str, forward, backward):
    """Create an op from raw-array forward/backward callables.

    forward(ctx, *arrays, **static) -> ndarray
    backward(ctx, grad) -> sequence with one ndarray (or None) per tensor input

    The returned callable takes Tensors plus the static keyword arguments and
    participates in the graph exactly like a built-in op.
    """

    def op(*tensors, **static):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ShapeError(f"{name}: positional inputs must be Tensors")
        ctx = OpContext()
        out_data = np.asarray(forward(ctx, *[t.data for t in tensors], **static))

        def bw(g):
            grads = backward(ctx, g)
            return tuple(grads)

        return _record(out_data, tensors, bw, name)

    op.__name__ = name
    return op


# ---------------------------------------------------------------------------
# parameters and checkpoints


class Parameters:
    """Ordered named tensors; optimizer state skips the ones marked as buffers."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, tensor: Tensor, buffer: bool = False) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = tensor
        if buffer:
            self._buffers.add(name)
        else:
            tensor.requires_grad = True
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def items(self):
        return self._items.items()

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable_items(self):
        return [(n, t) for n, t in self._items.items() if n not in self._buffers]

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def save(self, path):
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(self._items)))
            for name, t in self._items.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<Q", len(nb)))
                f.write(nb)
                f.write(struct.pack("<Q", t.data.ndim))
                for d in t.data.shape:
                    f.write(struct.pack("<Q", d))
                f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    @staticmethod
    def read_arrays(path) -> dict[str, np.ndarray]:
        def take(f, n, what):
            buf = f.read(n)
            if len(buf) != n:
                raise ValueError(f"checkpoint {path}: truncated while reading {what}")
            return buf

        out: dict[str, np.ndarray] = {}
        with open(path, "rb") as f:
            (count,) = struct.unpack("<Q", take(f, 8, "header"))
            for _ in range(count):
                (nlen,) = struct.unpack("<Q", take(f, 8, "name length"))
                name = take(f, nlen, "name").decode("utf-8")
                (rank,) = struct.unpack("<Q", take(f, 8, f"{name} rank"))
                dims = struct.unpack(f"<{rank}Q", take(f, 8 * rank, f"{name} dims"))
                size = int(np.prod(dims)) if rank else 1
                payload = take(f, 4 * size, f"{name} payload")
                out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return out

    def load(self, path):
        arrays = Parameters.read_arrays(path)
        if set(arrays) != set(self._items):
            missing = sorted(set(self._items) - set(arrays))
            extra = sorted(set(arrays) - set(self._items))
            raise ValueError(f"checkpoint {path}: parameter names mismatch (missing {missing}, unexpected {extra})")
        for name, arr in arrays.items():
            t = self._items[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"checkpoint {path}: {name} shape {arr.shape} vs {t.data.shape}")
            t.data[...] = arr.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# gradient checking (float64 shadow mode)


def gradcheck(f, tensors, step: float = 1e-4, sample: int | None = None, rng=None):
    """Max relative error between analytic gradients and central differences.

    `f(*tensors)` must build a scalar Tensor from scratch on every call. All
    inputs must be float64; `sample` limits the number of coordinates checked
    per tensor (all by default).
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ShapeError("gradcheck requires float64 tensors")
        t.grad = None
    out = f(*tensors)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    numeric = [np.zeros_like(t.data) for t in tensors]
    checked = [np.zeros(t.data.shape, dtype=bool) for t in tensors]
    if rng is None:
        rng = np.random.default_rng(0)
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if sample is None or sample >= n else rng.choice(n, size=sample, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                up = f(*tensors).item()
            flat[c] = orig - step
            with no_grad():
                down = f(*tensors).item()
            flat[c] = orig
            numeric[ti].reshape(-1)[c] = (up - down) / (2.0 * step)
            checked[ti].reshape(-1)[c] = True

    worst = 0.0
    denom = max(max((np.abs(n[m]).max() if m.any() else 0.0) for n, m in zip(numeric, checked)),
                max((np.abs(a[m]).max() if m.any() else 0.0) for a, m in zip(analytic, checked)),
                1e-6)
    for a, n, m in zip(analytic, numeric, checked):
        if m.any():
            worst = max(worst, float(np.abs(a[m] - n[m]).max() / denom))
    return worst
