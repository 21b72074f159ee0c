"""Dense NCHW tensors with a define-by-run reverse-mode tape.

Every differentiable primitive creates its output through :func:`_record`,
which stores the parent tensors and a closure mapping the output gradient to
parent gradients. Nodes carry a monotonically increasing sequence number, so
replaying the reachable nodes in descending sequence order is exactly the
reverse of the order in which they were recorded.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericalError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "backward",
    "concat",
    "stack",
    "where_const",
]


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32
_SEQ = itertools.count()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


_FLOP_LOG: list[list[float]] = []


@contextlib.contextmanager
def flop_recorder():
    """Accumulate FLOPs of convolutions, matmuls and FFTs executed inside the block.

    Serves as an instrumented cross-check of the analytic counter in ``network``.
    """
    box = [0.0]
    _FLOP_LOG.append(box)
    try:
        yield box
    finally:
        _FLOP_LOG.remove(box)


def record_flops(n: float) -> None:
    for box in _FLOP_LOG:
        box[0] += n


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradcheck)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)
        self.name = name

    # -- introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- arithmetic ----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return crop(self, idx)

    # -- method forms of the primitives --------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor, grad=None, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)

    grads = {id(loss): grad}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            t._parents = ()
            t._backward = None


# -- broadcasting ------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> tuple:
    """Same-rank singleton broadcasting; rank-0 operands broadcast freely."""
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch: {a} vs {b} (only same-rank or scalar broadcasting)")
    out = []
    for ax, (m, n) in enumerate(zip(a, b)):
        if m == n or n == 1:
            out.append(m)
        elif m == 1:
            out.append(n)
        else:
            raise ShapeError(f"axis {ax}: extent {m} vs {n} cannot broadcast")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (m, n) in enumerate(zip(g.shape, shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out.astype(a.dtype, copy=False), (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(a.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(a.dtype, copy=False),)

    return _record(out, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def where_const(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where mask is true, a constant elsewhere."""
    out = np.where(mask, a.data, np.asarray(fill, dtype=a.dtype))
    return _record(out, (a,), lambda g: (g * mask,))


# -- reductions --------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient is split evenly among tied maxima."""
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    m = x.max(axis=axes, keepdims=True)

    def bw(g):
        mask = (x == m)
        ties = mask.sum(axis=axes, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (mask * (gk / ties),)

    out = m if keepdims else np.squeeze(m, axis=axes)
    return _record(np.asarray(out), (a,), bw)


def mse_reduce(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def bw(g):
        ga = (2.0 / n) * g * diff
        return (ga if a.requires_grad else None, -ga if b.requires_grad else None)

    return _record(out, (a, b), bw)


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes; batch axes follow same-rank broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner axis: {a.shape[-1]} vs {b.shape[-2]}")
    if a.ndim != b.ndim:
        raise ShapeError(f"matmul rank mismatch: {a.shape} vs {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = ad @ bd
    record_flops(2.0 * out.size * ad.shape[-1])

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


# -- shape manipulation ------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def crop(a: Tensor, idx) -> Tensor:
    """Basic (slice) indexing; the adjoint scatters into a zero buffer."""
    shape = a.shape
    out = np.array(a.data[idx], copy=True)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis and m != n:
                raise ShapeError(f"concat axis {ax}: extent {m} vs {n}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def roll(a: Tensor, shift: tuple[int, int], axes=(2, 3)) -> Tensor:
    shift = tuple(int(s) for s in shift)
    neg = tuple(-s for s in shift)
    return _record(np.roll(a.data, shift, axis=axes), (a,), lambda g: (np.roll(g, neg, axis=axes),))


def channel_roll(a: Tensor, shifts: np.ndarray) -> Tensor:
    """Cyclically roll each channel of an NCHW tensor by its own (rows, cols) offset.

    ``shifts`` has shape (C, 2). Channels sharing an offset are rolled together.
    """
    shifts = np.asarray(shifts, dtype=np.int64)
    if shifts.shape != (a.shape[1], 2):
        raise ShapeError(f"axis 1: expected {a.shape[1]} shift pairs, got {shifts.shape}")
    groups: dict[tuple[int, int], list[int]] = {}
    for c, (dr, dc) in enumerate(shifts):
        groups.setdefault((int(dr), int(dc)), []).append(c)

    def apply(x, sign):
        out = np.empty_like(x)
        for (dr, dc), chans in groups.items():
            idx = chans if len(chans) > 1 else chans[0:1]
            out[:, idx] = np.roll(x[:, idx], (sign * dr, sign * dc), axis=(2, 3))
        return out

    return _record(apply(a.data, 1), (a,), lambda g: (apply(g, -1),))


_PAD_MODES = ("zero", "reflect", "cyclic")


def pad(a: Tensor, pads: tuple[tuple[int, int], tuple[int, int]], mode: str = "zero") -> Tensor:
    """Pad the last two axes by ((top, bottom), (left, right))."""
    if mode not in _PAD_MODES:
        raise ValueError(f"padding mode must be one of {_PAD_MODES}, got {mode!r}")
    (t, b), (l, r) = pads
    if t == b == l == r == 0:
        return a
    h, w = a.shape[-2:]
    if mode != "zero":
        limit_h = h - 1 if mode == "reflect" else h
        limit_w = w - 1 if mode == "reflect" else w
        if max(t, b) > limit_h:
            raise ShapeError(f"axis {a.ndim - 2}: {mode} pad {max(t, b)} exceeds extent {h}")
        if max(l, r) > limit_w:
            raise ShapeError(f"axis {a.ndim - 1}: {mode} pad {max(l, r)} exceeds extent {w}")
    width = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    np_mode = {"zero": "constant", "reflect": "reflect", "cyclic": "wrap"}[mode]
    out = np.pad(a.data, width, mode=np_mode)

    def bw(g):
        if mode == "zero":
            return (g[..., t:t + h, l:l + w].copy(),)
        g = _fold_axis(g, -2, t, b, h, mode)
        g = _fold_axis(g, -1, l, r, w, mode)
        return (g,)

    return _record(out, (a,), bw)


def _fold_axis(g: np.ndarray, axis: int, before: int, after: int, n: int, mode: str) -> np.ndarray:
    """Adjoint of reflect/cyclic padding along one axis."""
    g = np.moveaxis(g, axis, -1)
    core = g[..., before:before + n].copy()
    if before:
        src = (before - np.arange(before)) if mode == "reflect" else (n - before + np.arange(before))
        core[..., src] += g[..., :before]
    if after:
        src = (n - 2 - np.arange(after)) if mode == "reflect" else np.arange(after)
        core[..., src] += g[..., before + n:]
    return np.moveaxis(core, -1, axis)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = a.shape
    out = a.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (a,), bw)


# -- softmax -----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericalError("softmax received non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
