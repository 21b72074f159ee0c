"""Convolution, normalization and pooling primitives with hand-derived adjoints."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _record, flop_recorder, max_, mean, mul, pad, record_flops

__all__ = [
    "conv2d",
    "batch_norm2d",
    "layer_norm2d",
    "avg_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "flop_recorder",
    "record_flops",
]

BN_EPS = 1e-5


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _columns(x: np.ndarray, kh: int, kw: int, stride: int, groups: int) -> np.ndarray:
    """im2col: (groups, Cig*kh*kw, N*Ho*Wo) patch matrix."""
    n, c, _, _ = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    win = win.reshape(n, groups, c // groups, ho, wo, kh, kw)
    cols = win.transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(cols).reshape(groups, (c // groups) * kh * kw, n * ho * wo)


def _conv_valid(x: np.ndarray, w: np.ndarray, stride: int, groups: int):
    """Valid cross-correlation. Returns (out, cols); cols is reused by the adjoint."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    g = groups
    cog = co // g
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    p = ho * wo
    record_flops(2.0 * n * co * cig * kh * kw * p)
    if kh == kw == 1 and stride == 1:
        out = w.reshape(g, cog, cig) @ x.reshape(n, g, cig, p)
        return out.reshape(n, co, ho, wo), None
    if cig == 1 and cog == 1:
        out = np.zeros((n, co, ho, wo), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                patch = x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out += w[:, 0, i, j][None, :, None, None] * patch
        return out, None
    cols = _columns(x, kh, kw, stride, g)
    out = w.reshape(g, cog, cig * kh * kw) @ cols
    out = out.reshape(g, cog, n, ho, wo).transpose(2, 0, 1, 3, 4)
    return np.ascontiguousarray(out).reshape(n, co, ho, wo), cols


def _conv_valid_backward(x, w, gout, stride, groups, need_x, need_w, cols=None):
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    g = groups
    cog = co // g
    _, _, ho, wo = gout.shape
    p = ho * wo
    gx = gw = None
    if kh == kw == 1 and stride == 1:
        gr = gout.reshape(n, g, cog, p)
        if need_w:
            xr = x.reshape(n, g, cig, p)
            gw = (gr @ np.swapaxes(xr, -1, -2)).sum(axis=0).reshape(co, cig, 1, 1)
        if need_x:
            gx = (np.swapaxes(w.reshape(g, cog, cig), -1, -2) @ gr).reshape(n, c, h, wd)
        return gx, gw
    if cig == 1 and cog == 1:
        gx = np.zeros_like(x) if need_x else None
        gw = np.zeros_like(w) if need_w else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * (ho - 1) + 1, stride),
                      slice(j, j + stride * (wo - 1) + 1, stride))
                if need_w:
                    gw[:, 0, i, j] = (gout * x[sl]).sum(axis=(0, 2, 3))
                if need_x:
                    gx[sl] += w[:, 0, i, j][None, :, None, None] * gout
        return gx, gw
    gr = np.ascontiguousarray(gout.reshape(n, g, cog, p).transpose(1, 2, 0, 3)).reshape(g, cog, n * p)
    if need_w:
        if cols is None:
            cols = _columns(x, kh, kw, stride, g)
        gw = (gr @ np.swapaxes(cols, -1, -2)).reshape(co, cig, kh, kw)
    if need_x:
        gcols = np.swapaxes(w.reshape(g, cog, cig * kh * kw), -1, -2) @ gr
        gcols = gcols.reshape(g, cig, kh, kw, n, ho, wo).transpose(4, 0, 1, 2, 3, 5, 6)
        gcols = gcols.reshape(n, c, kh, kw, ho, wo)
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    return gx, gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding=0,
           padding_mode: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``padding`` is an int, an (ph, pw) pair, or ((top, bottom), (left, right)).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (Co, Ci/groups, Kh, Kw), got {w.shape}")
    co, cig, kh, kw = w.shape
    if x.shape[1] != cig * groups:
        raise ShapeError(f"axis 1 (channels): input has {x.shape[1]}, weight expects {cig * groups}")
    if co % groups:
        raise ShapeError(f"axis 0 (out channels): {co} not divisible by groups={groups}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias axis 0: expected ({co},), got {b.shape}")
    if isinstance(padding, int) or (len(padding) == 2 and isinstance(padding[0], int)):
        ph, pw = _pair(padding)
        pads = ((ph, ph), (pw, pw))
    else:
        pads = tuple(tuple(p) for p in padding)
    xp = pad(x, pads, padding_mode)
    h, wd = xp.shape[-2:]
    if h < kh or wd < kw:
        axis = 2 if h < kh else 3
        raise ShapeError(f"axis {axis}: padded extent smaller than kernel {kh}x{kw}")

    xd, wdat = xp.data, w.data
    out, cols = _conv_valid(xd, wdat, stride, groups)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(gout):
        gx, gw = _conv_valid_backward(xd, wdat, gout, stride, groups, xp.requires_grad, w.requires_grad, cols)
        gb = gout.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (xp, w, b) if b is not None else (xp, w)
    return _record(out, parents, bw)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization; running statistics are updated in place when training."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"axis 1 (channels): input has {c}, parameters have {gamma.shape[0]}")
    if x.size == 0:
        raise ShapeError("batch_norm2d received an empty batch")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def bw(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def bw(g):
            return (g * gd * inv[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def layer_norm2d(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels independently at every (n, h, w) position."""
    n, c, h, w = x.shape
    if weight.shape != (c,):
        raise ShapeError(f"axis 1 (channels): input has {c}, weight has {weight.shape[0]}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    wd = weight.data[None, :, None, None]
    out = wd * xhat + bias.data[None, :, None, None]

    def bw(g):
        dxhat = g * wd
        s1 = dxhat.sum(axis=1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
        dx = inv / c * (c * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record(out.astype(xd.dtype, copy=False), (x, weight, bias), bw)


def _box_valid(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Valid-mode running sum of length k along ``axis`` (output shrinks by k - 1)."""
    c = np.cumsum(a, axis=axis, dtype=a.dtype)
    n = a.shape[axis]
    head = np.take(c, [k - 1], axis=axis)
    tail = np.take(c, np.arange(k, n), axis=axis) - np.take(c, np.arange(0, n - k), axis=axis)
    return np.concatenate([head, tail], axis=axis)


def _box_sum(x: Tensor, k: int) -> Tensor:
    """Valid k x k box sum; its adjoint is the full box sum of the upstream gradient."""
    record_flops(2.0 * x.shape[0] * x.shape[1] * k * k * (x.shape[2] - k + 1) * (x.shape[3] - k + 1))
    out = _box_valid(_box_valid(x.data, k, 2), k, 3)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (_box_valid(_box_valid(gp, k, 2), k, 3),)

    return _record(out, (x,), bw)


def avg_pool2d(x: Tensor, kernel: int, stride: int = 1) -> Tensor:
    """Zero-padded box average (padding counted in the divisor), 'same' size at stride 1."""
    if stride == 1 and kernel % 2 == 1:
        r = kernel // 2
        summed = _box_sum(pad(x, ((r, r), (r, r)), "zero"), kernel)
        return mul(summed, Tensor(np.asarray(1.0 / (kernel * kernel), dtype=x.dtype)))
    c = x.shape[1]
    k = np.full((c, 1, kernel, kernel), 1.0 / (kernel * kernel), dtype=x.dtype)
    return conv2d(x, Tensor(k), None, stride=stride, padding=kernel // 2, groups=c)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    return max_(x, axis=(2, 3), keepdims=True)
