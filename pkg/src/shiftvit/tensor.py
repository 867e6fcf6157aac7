"""Dense tensors with reverse-mode autodiff and a multiply-accumulate counter.

Data lives in row-major numpy buffers. Every op records a closure that maps
the output gradient to input gradients; ``Tensor.backward`` walks the graph in
reverse topological order. Only the ops the model needs are provided.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


# --------------------------------------------------------------------------
# operation counting
# --------------------------------------------------------------------------


class OpCounter:
    """Tally of scalar multiply-accumulates issued by matmul and conv2d.

    ``by_tag`` splits the total by the tags active (via :func:`op_tag`) when
    each op ran, e.g. to isolate attention-score products.
    """

    def __init__(self):
        self.mul_adds = 0
        self.by_tag: Counter = Counter()
        self._tags: list[str] = []

    def add(self, n: int) -> None:
        n = int(n)
        self.mul_adds += n
        for tag in set(self._tags):
            self.by_tag[tag] += n

    def reset(self) -> None:
        self.mul_adds = 0
        self.by_tag.clear()


_local = threading.local()


def _state():
    if not hasattr(_local, "counter"):
        _local.counter = OpCounter()
        _local.grad_enabled = True
    return _local


def op_counter() -> OpCounter:
    """The calling thread's counter."""
    return _state().counter


@contextlib.contextmanager
def op_tag(name: str) -> Iterator[None]:
    tags = _state().counter._tags
    tags.append(name)
    try:
        yield
    finally:
        tags.pop()


@contextlib.contextmanager
def counting() -> Iterator[OpCounter]:
    """Run a block against a fresh counter and hand it back."""
    st = _state()
    saved = st.counter
    st.counter = OpCounter()
    try:
        yield st.counter
    finally:
        st.counter = saved


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _state().grad_enabled


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Without an explicit seed gradient ``self`` must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], copy=True)

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def roll(x: Tensor, shift, axis) -> Tensor:
    """Circular shift, ``out[i] = x[i - shift]`` along each axis."""
    neg = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _make(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, neg, axis),))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.data.size // max(out.size, 1)
    return _make(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / n,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading ones.

    Counts ``batch * m * k * n`` mul-adds.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    op_counter().add(batch * m * k * n)

    if b.ndim == 2:
        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("softmax: non-finite input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N x C)."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(labels.shape[0]), labels))
    return mean(picked) * -1.0


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        d = v.shape[-1]
        gx = rstd / d * (d * gxhat - gxhat.sum(-1, keepdims=True)
                         - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(v.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# convolution and pooling
# --------------------------------------------------------------------------


def _pad_nchw(v: np.ndarray, p: int, mode: str, fill=0.0) -> np.ndarray:
    if p == 0:
        return v
    widths = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "circular":
        return np.pad(v, widths, mode="wrap")
    if mode == "zero":
        return np.pad(v, widths, mode="constant", constant_values=fill)
    raise ValueError(f"unknown pad_mode {mode!r}")


def _fold_padding(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of ``_pad_nchw``: map a padded-input gradient back to the input."""
    if p == 0:
        return gp
    if mode == "zero":
        return gp[:, :, p:-p, p:-p]
    H = gp.shape[2] - 2 * p
    W = gp.shape[3] - 2 * p
    g = np.zeros(gp.shape[:2] + (H, W), dtype=gp.dtype)
    rows = np.arange(-p, H + p) % H
    cols = np.arange(-p, W + p) % W
    np.add.at(g, (slice(None), slice(None), rows[:, None], cols[None, :]), gp)
    return g


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """2-D cross-correlation of ``x`` (C x H x W or N x C x H x W) with ``w`` (O x C x K x K).

    Lowered to a single matmul over im2col patches; counts
    ``N * O * H' * W' * C * K * K`` mul-adds.
    """
    squeeze = x.ndim == 3
    xv = x.data[None] if squeeze else x.data
    if xv.ndim != 4 or w.ndim != 4 or xv.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    N, C, H, W = xv.shape
    O, _, K, K2 = w.shape
    if H + 2 * padding < K or W + 2 * padding < K2:
        raise ShapeError(f"conv2d: kernel {K}x{K2} larger than padded input {H}x{W} (padding {padding})")
    Ho, Wo = _out_extent(H, K, stride, padding), _out_extent(W, K2, stride, padding)
    xp = _pad_nchw(xv, padding, pad_mode)
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K2), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]          # N C Ho Wo K K
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * K * K2)
    wmat = w.data.reshape(O, C * K * K2)
    out = cols @ wmat.T                                          # (N Ho Wo) x O
    op_counter().add(N * Ho * Wo * O * C * K * K2)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(N, Ho, Wo, C, K, K2)
        gp = np.zeros_like(xp)
        for i in range(K):
            for j in range(K2):
                gp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = _fold_padding(gp, padding, pad_mode)
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def maxpool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling with implicit -inf padding; ties go to the first window index."""
    squeeze = x.ndim == 3
    xv = x.data[None] if squeeze else x.data
    N, C, H, W = xv.shape
    Ho, Wo = _out_extent(H, k, stride, padding), _out_extent(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d: window {k} too large for input {x.shape}")
    xp = _pad_nchw(xv, padding, "zero", fill=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo].reshape(N, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)                                    # first max wins
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gp = np.zeros_like(xp)
        ai, aj = np.divmod(arg, k)
        rows = ai + (np.arange(Ho) * stride)[None, None, :, None]
        cols = aj + (np.arange(Wo) * stride)[None, None, None, :]
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        np.add.at(gp, (n_idx, c_idx, rows, cols), g4)
        gx = gp[:, :, padding:padding + H, padding:padding + W]
        return (gx[0] if squeeze else gx,)

    return _make(np.ascontiguousarray(out), (x,), bw)
