"""Gating and attention operators used by the restoration blocks.

CAB/SAB follow the CBAM construction (shared pooled MLP with reduction r,
7x7 conv over channel-pooled maps). CAA pools locally, runs a pair of
depthwise strip convolutions and produces a sigmoid gate from the frequency
branch that multiplies the spatial branch.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .functional import avg_pool2d, global_avg_pool, global_max_pool
from .nn import Conv2d, Module, scalar_param
from .tensor import (
    Tensor,
    add,
    clamp,
    concat,
    div,
    exp,
    matmul,
    max_,
    mean,
    mul,
    permute,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
)

__all__ = [
    "ChannelAttention",
    "SpatialAttention",
    "ContextAnchorAttention",
    "GlobalLocalAttention",
    "HybridDualAttention",
    "ChannelCrossAttention",
]


def _check_pair(f_p: Tensor, f: Tensor) -> None:
    if f_p.shape != f.shape:
        raise ShapeError(f"gate source {f_p.shape} and gated features {f.shape} differ")


class ChannelAttention(Module):
    """sigmoid(MLP(avgpool f) + MLP(maxpool f)) -> (N, C, 1, 1) gates."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        if channels < reduction or channels % reduction:
            raise ConfigError(f"channel attention needs C divisible by r={reduction}, got C={channels}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = Conv2d(channels, channels // reduction, 1, bias=False, rng=rng)
        self.fc2 = Conv2d(channels // reduction, channels, 1, bias=False, rng=rng)

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(v)))

    def forward(self, f: Tensor) -> Tensor:
        return sigmoid(add(self._mlp(global_avg_pool(f)), self._mlp(global_max_pool(f))))

    def flops(self, n: int, h: int, w: int) -> float:
        c, m = self.channels, self.channels // self.reduction
        return 2 * (2.0 * n * c * m * 2)


class SpatialAttention(Module):
    """sigmoid(Conv7x7([mean_c f, max_c f])) -> (N, 1, H, W) gates."""

    def __init__(self, kernel: int = 7, rng=None):
        self.conv = Conv2d(2, 1, kernel, bias=False, rng=rng)

    def forward(self, f: Tensor) -> Tensor:
        pooled = concat([mean(f, axis=1, keepdims=True), max_(f, axis=1, keepdims=True)], axis=1)
        return sigmoid(self.conv(pooled))

    def flops(self, n: int, h: int, w: int) -> float:
        return self.conv.flops(n, h, w)


class ContextAnchorAttention(Module):
    def __init__(self, channels: int, strip: int = 11, pool: int = 7, rng=None):
        self.channels = channels
        self.pool = pool
        self.conv_in = Conv2d(channels, channels, 1, rng=rng)
        self.strip_h = Conv2d(channels, channels, (1, strip), groups=channels, rng=rng)
        self.strip_v = Conv2d(channels, channels, (strip, 1), groups=channels, rng=rng)
        self.conv_out = Conv2d(channels, channels, 1, rng=rng)

    def gate(self, f_p: Tensor) -> Tensor:
        t = avg_pool2d(f_p, self.pool)
        t = self.strip_v(self.strip_h(self.conv_in(t)))
        return sigmoid(self.conv_out(t))

    def forward(self, f_p: Tensor, f: Tensor) -> Tensor:
        _check_pair(f_p, f)
        return mul(self.gate(f_p), f)

    def flops(self, n: int, h: int, w: int) -> float:
        pool = 2.0 * n * self.channels * self.pool * self.pool * h * w
        return (pool + self.conv_in.flops(n, h, w) + self.strip_h.flops(n, h, w)
                + self.strip_v.flops(n, h, w) + self.conv_out.flops(n, h, w))


class GlobalLocalAttention(Module):
    """SAB(CAB(f_p) * f) * f."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        self.cab = ChannelAttention(channels, reduction, rng=rng)
        self.sab = SpatialAttention(rng=rng)

    def forward(self, f_p: Tensor, f: Tensor) -> Tensor:
        _check_pair(f_p, f)
        local = mul(self.cab(f_p), f)
        return mul(self.sab(local), f)

    def flops(self, n: int, h: int, w: int) -> float:
        return self.cab.flops(n, h, w) + self.sab.flops(n, h, w)


class HybridDualAttention(Module):
    """beta * CAB(f_p) * f + (1 - beta) * SAB(f_p) * f, with beta clamped to [0, 1]."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        self.cab = ChannelAttention(channels, reduction, rng=rng)
        self.sab = SpatialAttention(rng=rng)
        self.beta = scalar_param(0.5)

    def forward(self, f_p: Tensor, f: Tensor) -> Tensor:
        _check_pair(f_p, f)
        b = clamp(self.beta, 0.0, 1.0)
        channel_path = mul(self.cab(f_p), f)
        spatial_path = mul(self.sab(f_p), f)
        return add(mul(b, channel_path), mul(sub(1.0, b), spatial_path))

    def flops(self, n: int, h: int, w: int) -> float:
        return self.cab.flops(n, h, w) + self.sab.flops(n, h, w)


class ChannelCrossAttention(Module):
    """Multi-head transposed attention: softmax(Q K^T / delta) V over channels.

    Queries come from ``q_src``; keys and values from ``kv_src``. Each head owns
    ``dim / heads`` channels and attends over the full spatial extent.
    """

    def __init__(self, dim: int, heads: int | None = None, rng=None):
        heads = dim // 16 if heads is None else heads
        if heads < 1 or dim % heads:
            raise ConfigError(f"dim={dim} is not divisible into {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = Conv2d(dim, dim, 1, rng=rng)
        self.k = Conv2d(dim, dim, 1, rng=rng)
        self.v = Conv2d(dim, dim, 1, rng=rng)
        self.proj = Conv2d(dim, dim, 1, rng=rng)
        self.log_delta = scalar_param(math.log(dim / 16))

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta.data))

    def _split(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        return reshape(t, (n, self.heads, c // self.heads, h * w))

    def attention_map(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        q = self._split(self.q(q_src))
        k = self._split(self.k(kv_src))
        logits = matmul(q, permute(k, (0, 1, 3, 2)))
        return softmax(div(logits, exp(self.log_delta)), axis=-1)

    def forward(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        if q_src.shape != kv_src.shape:
            raise ShapeError(f"query source {q_src.shape} and key/value source {kv_src.shape} differ")
        if q_src.shape[1] != self.dim:
            raise ShapeError(f"axis 1 (channels): attention built for {self.dim}, got {q_src.shape[1]}")
        n, c, h, w = q_src.shape
        attn = self.attention_map(q_src, kv_src)
        out = matmul(attn, self._split(self.v(kv_src)))
        return self.proj(reshape(out, (n, c, h, w)))

    def flops(self, n: int, h: int, w: int) -> float:
        ch = self.dim // self.heads
        convs = 4 * self.q.flops(n, h, w)
        return convs + 2 * (2.0 * n * self.heads * ch * ch * h * w)
