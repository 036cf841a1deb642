"""Float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its output together with a closure mapping the upstream
gradient to one gradient per parent. ``backward`` traces the graph from a
scalar loss, orders it topologically and runs the closures in reverse.
Arrays are channels-last: feature maps are ``(..., height, width, channels)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def relu(self) -> "Tensor":
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- graph


@dataclass
class ComputeGraph:
    """Topologically ordered nodes reachable from one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor needing it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _result(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, "mul", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # fold all leading axes into one product instead of a batched one
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, "matmul", (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise ValueError("softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), bw)


def softmax_rows(e: Tensor) -> Tensor:
    """Row-wise softmax of a square score matrix (or a batch of them)."""
    if e.ndim < 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {e.shape}")
    return softmax(e, axis=-1)


def cross_entropy(logits: Tensor, target, class_weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over all positions.

    ``logits`` is ``(..., K)``, ``target`` an integer array of the leading
    shape. The weighted mean divides by the summed weights of the targets.
    """
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError("target must hold integer class indices")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class out of range [0, {k}): min {target.min()}, max {target.max()}")
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    wt = w[target]
    total = wt.sum()
    loss = -(wt * picked).sum() / total

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (wt / total * g)[..., None],)

    return _result(np.asarray(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------- reductions & shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (int, np.integer, slice)) or it is Ellipsis):
            raise TypeError(f"only basic indexing is differentiable, got {type(it).__name__}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), "slice", (x,), bw)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return getitem(x, tuple(idx))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    return _result(np.roll(x.data, shift, axis=axis), "roll", (x,), lambda g: (np.roll(g, -shift, axis=axis),))


def take_along_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = a[..., i, index[i, j]]`` for a 2-D integer ``index``."""
    index = np.asarray(index)
    if index.ndim != 2 or a.ndim < 2 or index.shape[0] != a.shape[-2]:
        raise ShapeError(f"take_along_last: index {index.shape} incompatible with {a.shape}")
    lead = a.shape[:-2]
    n, r = a.shape[-2], a.shape[-1]
    m = index.shape[1]
    out = np.take_along_axis(a.data, np.broadcast_to(index, lead + index.shape), axis=-1)

    def bw(g):
        batch = int(np.prod(lead)) if lead else 1
        flat_idx = (np.arange(n)[:, None] * r + index).ravel()
        offsets = (np.arange(batch) * n * r)[:, None] + flat_idx[None, :]
        acc = np.bincount(offsets.ravel(), weights=g.reshape(batch, n * m).ravel(), minlength=batch * n * r)
        return (acc.reshape(a.shape),)

    return _result(out, "take_along_last", (a,), bw)


# ---------------------------------------------------------------- spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding=(0, 0)) -> Tensor:
    """Channels-last convolution: x ``(B,H,W,Cin)``, w ``(kh,kw,Cin,Cout)``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    ph, pw = padding
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    wt = w.data.transpose(2, 0, 1, 3)
    out = np.tensordot(win, wt, axes=([3, 4, 5], [0, 1, 2]))
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        gcols = np.tensordot(g, wt, axes=([3], [3]))
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[..., i, j]
        gx = gxp[:, ph:ph + h, pw:pw + wd]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads

    return _result(out, "conv2d", parents, bw)


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear-interpolation weights, half-pixel centres, edge-clamped."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def _separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Apply ``mh`` along axis -3 and ``mw`` along axis -2 of ``(..., H, W, C)``."""
    *lead, h, w, c = x.shape
    y = np.matmul(mh, x.reshape(*lead, h, w * c)).reshape(*lead, mh.shape[0], w, c)
    return np.matmul(mw, y)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double the two spatial axes of ``(..., H, W, C)``."""
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample_2x needs (..., H, W, C), got {x.shape}")
    uh = upsample_matrix(x.shape[-3])
    uw = upsample_matrix(x.shape[-2])
    out = _separable(x.data, uh, uw)
    return _result(out, "upsample2x", (x,), lambda g: (_separable(g, uh.T, uw.T),))
