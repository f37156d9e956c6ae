"""Dense tensors with reverse-mode automatic differentiation.

A minimal numpy-backed engine: every operation computes its forward value
eagerly and, when gradients are enabled, records its parent tensors plus a
closure that routes the incoming gradient to them.  Graphs live for one
forward pass; ``backward`` walks them once in reverse topological order and
accumulates into the ``.grad`` buffer of every reachable tensor.

Precision is a build-level switch (``set_default_dtype``): 64-bit for tests
and gradient checking, 32-bit allowed for training.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_NODE_IDS = itertools.count()


def set_default_dtype(dtype) -> None:
    """Select the buffer precision for newly created tensors (f32 or f64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass(frozen=True)
class DimOrder:
    """A permutation of axis indices, e.g. (1, 2, 0) sends axis 1 to front."""

    order: tuple

    def __post_init__(self):
        o = tuple(int(i) for i in self.order)
        object.__setattr__(self, "order", o)
        if sorted(o) != list(range(len(o))):
            raise ShapeError(f"order {o} is not a permutation of 0..{len(o) - 1}")

    def inverse(self) -> tuple:
        inv = [0] * len(self.order)
        for i, a in enumerate(self.order):
            inv[a] = i
        return tuple(inv)

    def __len__(self):
        return len(self.order)


# The four branch orders over axes (C, H, W).
CHW = DimOrder((0, 1, 2))
HWC = DimOrder((1, 2, 0))
WCH = DimOrder((2, 0, 1))
CWH = DimOrder((0, 2, 1))

BRANCH_ORDERS = {"CHW": CHW, "HWC": HWC, "WCH": WCH, "CWH": CWH}


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    ``data`` is always a C-contiguous (row-major) float buffer.  Tensors are
    treated as immutable once built into a graph; only optimizer updates
    mutate leaf ``data`` in place, between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        # ascontiguousarray promotes 0-d to 1-d; reshape restores the rank
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_NODE_IDS)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, order):
        return permute(self, order)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(out_data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the backward rule when grads are on."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(out_data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), back)


# -- matmul and shape ops -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out, (a, b), back)


def permute(t, order) -> Tensor:
    """Reorder axes: out.shape[i] == t.shape[order[i]]."""
    t = as_tensor(t)
    order = order if isinstance(order, DimOrder) else DimOrder(tuple(order))
    if len(order) != t.ndim:
        raise ShapeError(f"order of length {len(order)} on rank-{t.ndim} tensor")
    axes = order.order
    inv = order.inverse()
    out = np.transpose(t.data, axes)

    def back(g):
        if t.requires_grad:
            _accum(t, np.transpose(g, inv))

    return _make(out, (t,), back)


def inverse_permute(t, order) -> Tensor:
    """Undo ``permute`` with the same order: the round trip is the identity."""
    order = order if isinstance(order, DimOrder) else DimOrder(tuple(order))
    return permute(t, DimOrder(order.inverse()))


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    out = t.data.reshape(shape)

    def back(g):
        if t.requires_grad:
            _accum(t, g.reshape(t.shape))

    return _make(out, (t,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, tuple(ts), back)


# -- reductions ---------------------------------------------------------------


def tsum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not t.requires_grad:
            return
        if axis is None:
            _accum(t, np.broadcast_to(g, t.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, np.broadcast_to(g, t.shape).copy())

    return _make(out, (t,), back)


def tmean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    if axis is None:
        count = t.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in ax:
            count *= t.shape[a]
    return tsum(t, axis=axis, keepdims=keepdims) * (1.0 / count)


def tmax(t, axis: int, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    kept = t.data.max(axis=axis, keepdims=True)
    out = kept if keepdims else kept.squeeze(axis)
    # Ties share the gradient evenly so the subgradient still sums to one.
    mask = (t.data == kept).astype(t.data.dtype)
    counts = mask.sum(axis=axis, keepdims=True)

    def back(g):
        if t.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(t, mask * (g / counts))

    return _make(out, (t,), back)


def tmin(t, axis: int, keepdims: bool = False) -> Tensor:
    return neg(tmax(neg(t), axis=axis, keepdims=keepdims))


# -- pointwise nonlinearities --------------------------------------------------


def relu(t) -> Tensor:
    t = as_tensor(t)
    out = np.maximum(t.data, 0.0)

    def back(g):
        if t.requires_grad:
            _accum(t, g * (t.data > 0))

    return _make(out, (t,), back)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    x = t.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        if t.requires_grad:
            _accum(t, g * out * (1.0 - out))

    return _make(out, (t,), back)


def log(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(t.data)

    def back(g):
        if t.requires_grad:
            _accum(t, g / t.data)

    return _make(out, (t,), back)


def exp(t) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)

    def back(g):
        if t.requires_grad:
            _accum(t, g * out)

    return _make(out, (t,), back)


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(t.data)

    def back(g):
        if t.requires_grad:
            _accum(t, g * 0.5 / out)

    return _make(out, (t,), back)


def clamp_min(t, floor: float) -> Tensor:
    t = as_tensor(t)
    out = np.maximum(t.data, floor)

    def back(g):
        if t.requires_grad:
            _accum(t, g * (t.data >= floor))

    return _make(out, (t,), back)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if t.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accum(t, out * (g - dot))

    return _make(out, (t,), back)


def log_softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        if t.requires_grad:
            _accum(t, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (t,), back)


def pick(t, indices) -> Tensor:
    """Select one entry per row along the last axis: out[i] = t[i, idx[i]]."""
    t = as_tensor(t)
    from .errors import RangeError

    if t.ndim == 1:
        idx = int(indices)
        if not 0 <= idx < t.shape[0]:
            raise RangeError(f"index {idx} out of range for axis of size {t.shape[0]}")
        out = t.data[idx : idx + 1].reshape(())

        def back1(g):
            if t.requires_grad:
                buf = np.zeros_like(t.data)
                buf[idx] = g
                _accum(t, buf)

        return _make(out, (t,), back1)

    if t.ndim != 2:
        raise ShapeError(f"pick needs a rank-1 or rank-2 tensor, got {t.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (t.shape[0],):
        raise ShapeError(f"indices shape {idx.shape} does not match rows {t.shape[0]}")
    if np.any(idx < 0) or np.any(idx >= t.shape[1]):
        raise RangeError(f"index out of range for axis of size {t.shape[1]}")
    rows = np.arange(t.shape[0])
    out = t.data[rows, idx]

    def back(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            np.add.at(buf, (rows, idx), g)
            _accum(t, buf)

    return _make(out, (t,), back)


# -- pooling and convolution ---------------------------------------------------


def global_avg_pool(t) -> Tensor:
    """Average over the two trailing spatial axes: (..., C, H, W) -> (..., C)."""
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeError(f"global_avg_pool needs rank >= 3, got {t.shape}")
    return tmean(t, axis=(-2, -1))


def channel_avg_pool(t) -> Tensor:
    """Per-position mean over channels: (..., C, H, W) -> (..., 1, H, W)."""
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeError(f"channel_avg_pool needs rank >= 3, got {t.shape}")
    return tmean(t, axis=-3, keepdims=True)


def channel_max_pool(t) -> Tensor:
    """Per-position max over channels: (..., C, H, W) -> (..., 1, H, W)."""
    t = as_tensor(t)
    if t.ndim < 3:
        raise ShapeError(f"channel_max_pool needs rank >= 3, got {t.shape}")
    return tmax(t, axis=-3, keepdims=True)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) via im2col.

    x: (N, C_in, H, W) or (C_in, H, W); w: (C_out, C_in, kh, kw); b: (C_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x
    if x4.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input/weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x4.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ShapeError(f"invalid stride/padding ({s}, {p})")
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1

    xp = np.pad(x4.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4.data
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    cols2 = cols.reshape(n, cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (w2 @ cols2).reshape(n, cout, ho, wo)
    bt = as_tensor(b) if b is not None else None
    if bt is not None:
        if bt.shape != (cout,):
            raise ShapeError(f"bias shape {bt.shape} does not match {cout} output channels")
        out = out + bt.data.reshape(1, cout, 1, 1)

    parents = (x4, w) + ((bt,) if bt is not None else ())

    def back(g):
        g2 = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            dw = np.einsum("nol,nkl->ok", g2, cols2).reshape(w.shape)
            _accum(w, dw)
        if bt is not None and bt.requires_grad:
            _accum(bt, g.sum(axis=(0, 2, 3)))
        if x4.requires_grad:
            dcols = (w2.T @ g2).reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
            _accum(x4, dxp[:, :, p : p + h, p : p + wd] if p else dxp)

    out_t = _make(out, parents, back)
    if squeeze:
        out_t = reshape(out_t, out_t.shape[1:])
    return out_t


# -- backward pass and gradient checking ----------------------------------------


def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable tensor's ``grad``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` supplies the evaluation
    point (Tensor or array).  Error per component is
    |analytic - numeric| / max(1e-8, |analytic|).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DEFAULT_DTYPE)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.copy()

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x0.shape)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("NaN/Inf encountered during gradient check")
    denom = np.maximum(1e-8, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
