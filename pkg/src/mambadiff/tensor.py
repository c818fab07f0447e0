"""Dense tensor type with a reverse-mode differentiation tape.

The engine is deliberately small: numpy arrays for storage and forward
arithmetic, plus an explicit tape of operation nodes recorded in creation
order. Creation order is a topological order, so the backward pass is a
single reverse sweep over the node list. Ops record onto the innermost
active tape only; with no tape active every op is a plain forward
computation (the mode used for sampling and benchmarking).

Precision is a process-wide default (float32) with a float64 switch used
by the verification suites; see ``set_default_dtype`` / ``precision``.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "BufferPool",
    "record",
    "active_tape",
    "set_default_dtype",
    "default_dtype",
    "precision",
    "tensor",
    "zeros",
    "full",
    "randn",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "expm1",
    "softplus",
    "silu",
    "rms_norm",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "split",
    "unbind",
    "stack",
    "gather",
    "scatter",
    "take_rows",
    "where",
    "conv2d_dw",
    "conv1d_dw_causal",
    "squared_error",
    "inverse_permutation",
]


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) are incompatible for an op."""


_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_default = np.dtype(np.float32)

# exp/expm1 inputs are clipped here so finite inputs never overflow.
_EXP_MAX = {np.dtype(np.float32): 80.0, np.dtype(np.float64): 700.0}


def set_default_dtype(name: str) -> None:
    """Set the process default precision; ``name`` is 'f32' or 'f64'."""
    global _default
    if name not in _DTYPE_NAMES:
        raise ValueError(f"unknown precision {name!r}; expected 'f32' or 'f64'")
    _default = np.dtype(_DTYPE_NAMES[name])


def default_dtype() -> np.dtype:
    return _default


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ('f32' or 'f64')."""
    global _default
    saved = _default
    set_default_dtype(name)
    try:
        yield
    finally:
        _default = saved


if os.environ.get("DIM_PRECISION") in _DTYPE_NAMES:
    set_default_dtype(os.environ["DIM_PRECISION"])


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; reverse traversal yields gradients.

    Nodes are appended in creation order, which is a valid topological
    order of the computation graph. A tape is confined to one job; do not
    share it across threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Reverse sweep from ``loss``; returns gradients keyed by tensor.

        Outputs that never fed into ``loss`` contribute zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gouts = [grads.get(o) for o in node.outputs]
            if all(g is None for g in gouts):
                continue
            gins = node.backward_fn(gouts)
            for t, g in zip(node.inputs, gins):
                if g is None:
                    continue
                acc = grads.get(t)
                if acc is None:
                    grads[t] = g
                else:
                    buf = _alloc(acc.shape, acc.dtype)
                    np.add(acc, g, out=buf)
                    grads[t] = buf
        return grads


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record() -> Tape:
    """Open a fresh tape; use as ``with record() as tape: ...``."""
    return Tape()


# ---------------------------------------------------------------------------
# Buffer pool
# ---------------------------------------------------------------------------


class BufferPool:
    """Step-scoped recycling of op output buffers.

    Keeping one tape's worth of arrays alive defeats the allocator's block
    reuse, so every step pays page-fault costs on fresh pages. A pool
    hands out buffers keyed by (shape, dtype) and, on :meth:`recycle`,
    marks everything it handed out as reusable again. Callers own the
    lifecycle: recycle only once all arrays from the previous step are
    dead to their consumers (the training loop recycles at step start,
    after the optimizer has consumed the gradients).
    """

    def __init__(self):
        self._free: dict[tuple, list[np.ndarray]] = {}
        self._used: list[tuple[tuple, np.ndarray]] = []

    def get(self, shape: tuple[int, ...], dtype) -> np.ndarray:
        key = (tuple(shape), np.dtype(dtype).str)
        bucket = self._free.get(key)
        buf = bucket.pop() if bucket else np.empty(shape, dtype)
        self._used.append((key, buf))
        return buf

    def recycle(self) -> None:
        for key, buf in self._used:
            self._free.setdefault(key, []).append(buf)
        self._used.clear()

    @contextlib.contextmanager
    def active(self):
        _pool_stack.append(self)
        try:
            yield self
        finally:
            _pool_stack.pop()


_pool_stack: list[BufferPool] = []


def _alloc(shape, dtype) -> np.ndarray:
    if _pool_stack:
        return _pool_stack[-1].get(tuple(shape), dtype)
    return np.empty(shape, dtype)


def _alloc_like(arr: np.ndarray) -> np.ndarray:
    return _alloc(arr.shape, arr.dtype)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-d array of 32- or 64-bit reals, optionally tape-tracked.

    Tensors are immutable once produced by an op. Hashing and equality are
    by identity so tensors can key gradient dicts.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    def _tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def backward(self) -> dict["Tensor", np.ndarray]:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() requires an active tape (use `with record() as tape:`)")
        return tape.backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype if dtype is not None else _default))


def full(shape, value, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype if dtype is not None else _default))


def randn(shape, rng: np.random.Generator, std: float = 1.0, dtype=None) -> Tensor:
    arr = rng.standard_normal(shape) * std
    return Tensor(arr.astype(dtype if dtype is not None else _default))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------


def _make(op: str, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.node = None
    tape = active_tape()
    if tape is not None and any(t._tracked() for t in inputs):
        node = Node(op, tuple(inputs), (out,), lambda gouts: backward_fn(gouts[0]))
        out.node = node
        tape.nodes.append(node)
    return out


def _make_multi(op: str, inputs: Sequence[Tensor], out_datas, backward_fn) -> tuple[Tensor, ...]:
    outs = []
    for d in out_datas:
        t = Tensor.__new__(Tensor)
        t.data = d
        t.requires_grad = False
        t.node = None
        outs.append(t)
    outs = tuple(outs)
    tape = active_tape()
    if tape is not None and any(t._tracked() for t in inputs):
        node = Node(op, tuple(inputs), outs, backward_fn)
        for o in outs:
            o.node = node
        tape.nodes.append(node)
    return outs


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def _binary_out(ufunc, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = _alloc(np.broadcast_shapes(a.shape, b.shape), a.dtype)
    ufunc(a, b, out=out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    return _make(
        "add",
        (a, b),
        _binary_out(np.add, a.data, b.data),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    return _make(
        "sub",
        (a, b),
        _binary_out(np.subtract, a.data, b.data),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(_binary_out(np.multiply, g, bd), a.shape)
        gb = _unbroadcast(_binary_out(np.multiply, g, ad), b.shape)
        return ga, gb

    return _make("mul", (a, b), _binary_out(np.multiply, ad, bd), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("div", a, b)
    ad, bd = a.data, b.data
    out = _binary_out(np.divide, ad, bd)

    def bwd(g):
        ga = _unbroadcast(_binary_out(np.divide, g, bd), a.shape)
        tmp = _binary_out(np.multiply, g, out)
        np.divide(tmp, bd, out=tmp)
        np.negative(tmp, out=tmp)
        return ga, _unbroadcast(tmp, b.shape)

    return _make("div", (a, b), out, bwd)


def _matmul_out(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = _alloc(shape, a.dtype)
    np.matmul(a, b, out=out)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        g = np.ascontiguousarray(g)
        ga = _unbroadcast(_matmul_out(g, np.swapaxes(bd, -1, -2)), a.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            # weight-matrix case: one flat GEMM instead of batched + reduce
            k, n = bd.shape
            gb = _alloc(bd.shape, bd.dtype)
            np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n), out=gb)
        else:
            gb = _unbroadcast(_matmul_out(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", (a, b), _matmul_out(ad, bd), bwd)


def exp(x: Tensor) -> Tensor:
    out = _alloc_like(x.data)
    np.minimum(x.data, _EXP_MAX[x.dtype], out=out)
    np.exp(out, out=out)
    return _make("exp", (x,), out, lambda g: (_binary_out(np.multiply, g, out),))


def expm1(x: Tensor) -> Tensor:
    out = _alloc_like(x.data)
    np.minimum(x.data, _EXP_MAX[x.dtype], out=out)
    np.expm1(out, out=out)

    def bwd(g):
        gx = _binary_out(np.multiply, g, out)
        gx += g
        return (gx,)

    return _make("expm1", (x,), out, bwd)


def _sigmoid_into(x: np.ndarray) -> np.ndarray:
    # sigmoid(x) = (tanh(x/2) + 1) / 2: one transcendental pass, stable in both tails
    out = _alloc_like(x)
    np.multiply(x, x.dtype.type(0.5), out=out)
    np.tanh(out, out=out)
    out += 1.0
    out *= x.dtype.type(0.5)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as log1p(exp(-|x|)) + max(x, 0)."""
    xd = x.data
    out = _alloc_like(xd)
    np.abs(xd, out=out)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    tmp = _alloc_like(xd)
    np.maximum(xd, 0, out=tmp)
    out += tmp

    def bwd(g):
        gx = _sigmoid_into(xd)
        gx *= g
        return (gx,)

    return _make("softplus", (x,), out, bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); sigmoid comes from one tanh pass."""
    from . import kernels

    xd = np.ascontiguousarray(x.data)
    sig = _alloc_like(xd)
    np.multiply(xd, xd.dtype.type(0.5), out=sig)
    np.tanh(sig, out=sig)
    out = _alloc_like(xd)
    kernels._silu_fwd(xd, sig, out)  # sig now holds sigmoid(x)

    def bwd(g):
        gx = _alloc_like(xd)
        kernels._silu_bwd(np.ascontiguousarray(g), xd, sig, gx)
        return (gx,)

    return _make("silu", (x,), out, bwd)


def rms_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to unit root-mean-square (no learned gain)."""
    from . import kernels

    xd = np.ascontiguousarray(x.data)
    n = xd.shape[-1]
    x2d = xd.reshape(-1, n)
    out = _alloc_like(xd)
    inv = _alloc((x2d.shape[0],), xd.dtype)
    kernels._rmsnorm_fwd(x2d, xd.dtype.type(eps), out.reshape(-1, n), inv)

    def bwd(g):
        gx = _alloc_like(xd)
        kernels._rmsnorm_bwd(np.ascontiguousarray(g).reshape(-1, n), x2d, inv, gx.reshape(-1, n))
        return (gx,)

    return _make("rms_norm", (x,), out, bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        buf = _alloc_like(xd)
        np.copyto(buf, g)
        return (buf,)

    return _make("sum", (x,), np.asarray(out, dtype=xd.dtype), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = xd.mean(axis=axis, keepdims=keepdims)
    count = xd.size if axis is None else np.prod([xd.shape[a] for a in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        buf = _alloc_like(xd)
        np.copyto(buf, g)
        buf /= xd.dtype.type(count)
        return (buf,)

    return _make("mean", (x,), np.asarray(out, dtype=xd.dtype), bwd)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = _alloc(tuple(x.shape[a] for a in axes), x.dtype)
    np.copyto(out, x.data.transpose(axes))
    return _make("transpose", (x,), out, lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError("concat: mixed dtypes")
    sizes = [t.shape[axis] for t in tensors]
    shape = list(tensors[0].shape)
    shape[axis] = sum(sizes)
    out = _alloc(tuple(shape), dt)
    np.concatenate([t.data for t in tensors], axis=axis, out=out)

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _make("concat", tuple(tensors), out, bwd)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of {x.shape}")
    cuts = np.cumsum(sizes)[:-1]
    outs = []
    for piece in np.split(x.data, cuts, axis=axis):
        buf = _alloc(piece.shape, piece.dtype)
        np.copyto(buf, piece)
        outs.append(buf)

    def bwd(gouts):
        pieces = []
        for g, o in zip(gouts, outs):
            pieces.append(g if g is not None else np.zeros_like(o))
        return (np.concatenate(pieces, axis=axis),)

    return _make_multi("split", (x,), outs, bwd)


def unbind(x: Tensor, axis: int) -> tuple[Tensor, ...]:
    """Split ``x`` into its slices along ``axis`` (each slice squeezed)."""
    n = x.shape[axis]
    moved = np.moveaxis(x.data, axis, 0)
    outs = [np.ascontiguousarray(moved[i]) for i in range(n)]

    def bwd(gouts):
        g = np.stack(
            [go if go is not None else np.zeros_like(o) for go, o in zip(gouts, outs)],
            axis=0,
        )
        return (np.moveaxis(g, 0, axis),)

    return _make_multi("unbind", (x,), outs, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _make("stack", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# Indexing ops
# ---------------------------------------------------------------------------


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=perm.dtype)
    return inv


def _check_permutation(op: str, index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index)
    if index.ndim != 1 or index.size != n or np.sort(index).tobytes() != np.arange(n, dtype=index.dtype).tobytes():
        raise ShapeError(f"{op}: index of length {index.size} is not a permutation of {n} rows")
    return index


def _take_out(x: np.ndarray, idx: np.ndarray, axis: int) -> np.ndarray:
    shape = list(x.shape)
    shape[axis] = idx.size
    out = _alloc(tuple(shape), x.dtype)
    np.take(x, idx, axis=axis, out=out)
    return out


def gather(x: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder rows along ``axis``: out[i] = x[perm[i]]. ``perm`` must be a permutation."""
    perm = _check_permutation("gather", perm, x.shape[axis])
    inv = inverse_permutation(perm)
    return _make("gather", (x,), _take_out(x.data, perm, axis), lambda g: (_take_out(np.ascontiguousarray(g), inv, axis),))


def scatter(x: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Inverse of :func:`gather` for the same permutation: out[perm[i]] = x[i]."""
    perm = _check_permutation("scatter", perm, x.shape[axis])
    inv = inverse_permutation(perm)
    return _make("scatter", (x,), _take_out(x.data, inv, axis), lambda g: (_take_out(np.ascontiguousarray(g), perm, axis),))


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup with repeats allowed (embedding tables); grads accumulate."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.min() < 0 or indices.max() >= table.shape[0]:
        raise ShapeError(f"take_rows: index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _make("take_rows", (table,), table.data[indices], bwd)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (no gradient to the mask)."""
    _check_binary("where", a, b)
    out = np.where(mask, a.data, b.data)

    def bwd(g):
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(mask, g, zero), a.shape)
        gb = _unbroadcast(np.where(mask, zero, g), b.shape)
        return ga, gb

    return _make("where", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# Convolutions (depthwise only)
# ---------------------------------------------------------------------------


def conv2d_dw(x: Tensor, w: Tensor) -> Tensor:
    """3x3 depthwise convolution over (B, C, H, W), stride 1, zero padding 1."""
    if x.ndim != 4 or w.shape != (x.shape[1], 3, 3):
        raise ShapeError(f"conv2d_dw: expected x (B,C,H,W) and w (C,3,3), got {x.shape} vs {w.shape}")
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=xd.dtype)
    xp[:, :, 1:-1, 1:-1] = xd
    out = np.zeros_like(xd)
    for dy in range(3):
        for dx in range(3):
            out += wd[:, dy, dx][None, :, None, None] * xp[:, :, dy : dy + H, dx : dx + W]

    def bwd(g):
        gp = np.zeros((B, C, H + 2, W + 2), dtype=g.dtype)
        gp[:, :, 1:-1, 1:-1] = g
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for dy in range(3):
            for dx in range(3):
                # flipped kernel taps for the input gradient
                gx += wd[:, 2 - dy, 2 - dx][None, :, None, None] * gp[:, :, dy : dy + H, dx : dx + W]
                gw[:, dy, dx] = np.einsum(
                    "bchw,bchw->c", g, xp[:, :, dy : dy + H, dx : dx + W]
                )
        return gx, gw

    return _make("conv2d_dw", (x, w), out, bwd)


def conv1d_dw_causal(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Causal depthwise 1-d conv over (B, L, C) with kernel (K, C), left zero-padded."""
    from . import kernels

    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d_dw_causal: expected x (B,L,C) and w (K,C), got {x.shape} vs {w.shape}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    B, L, C = xd.shape
    K = wd.shape[0]
    bd = np.zeros(C, dtype=xd.dtype) if bias is None else np.ascontiguousarray(bias.data)
    out = _alloc_like(xd)
    kernels._conv1d_fwd(xd, wd, bd, out)

    def bwd(gouts):
        g = np.ascontiguousarray(gouts[0])
        gx = _alloc_like(xd)
        gw_part = _alloc((B, K, C), xd.dtype)
        gw_part.fill(0)
        gb_part = _alloc((B, C), xd.dtype)
        gb_part.fill(0)
        kernels._conv1d_bwd(g, xd, wd, gx, gw_part, gb_part)
        grads = [gx, gw_part.sum(axis=0)]
        if bias is not None:
            grads.append(gb_part.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    outs = _make_multi("conv1d_dw_causal", inputs, (out,), bwd)
    return outs[0]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = sub(pred, target)
    return tensor_mean(mul(d, d))
