"""Residual restoration blocks, scale changers and the two-headed output."""

from __future__ import annotations

from .attention import (
    ChannelCrossAttention,
    ContextAnchorAttention,
    GlobalLocalAttention,
    HybridDualAttention,
)
from .nn import Conv2d, LayerNorm2d, Module, scalar_param
from .shift_window import (
    ShiftWindowConfig,
    WindowedFeature,
    shift_window,
    shift_window_inverse,
    window_divide,
    window_merge,
)
from .spectral import FrequencyProcessor
from .tensor import Tensor, add, clamp, gelu, mul, relu, roll, sub, upsample_nearest

__all__ = [
    "OAIBlock",
    "HDDAConv",
    "HDCTransformer",
    "PlainBlock",
    "DoubleOut",
    "SingleOut",
    "Downsample",
    "Upsample",
]


class OAIBlock(Module):
    """Shift-window block blending global-local and context-anchor attention.

    y = a * GLA(FP(F), F) + (1 - a) * CAA(FP(F), F) on F = SW(x), a = clamp(alpha, 0, 1);
    the result is unfolded back to x's layout and added to x.
    """

    def __init__(self, channels: int, expansion: int, shift: int | None = None,
                 reduction: int = 4, strip: int = 11, rng=None):
        self.channels = channels
        self.window = ShiftWindowConfig(expansion, shift, shift)
        k = channels * expansion * expansion
        self.fp = FrequencyProcessor(k, rng=rng)
        self.gla = GlobalLocalAttention(k, reduction, rng=rng)
        self.caa = ContextAnchorAttention(k, strip, rng=rng)
        self.alpha = scalar_param(0.5)

    def blend(self, x: Tensor) -> WindowedFeature:
        f = shift_window(x, self.window)
        fp = self.fp(f.data)
        a = clamp(self.alpha, 0.0, 1.0)
        y = add(mul(a, self.gla(fp, f.data)), mul(sub(1.0, a), self.caa(fp, f.data)))
        return WindowedFeature(y, f.origin, f.config, f.shift)

    def forward(self, x: Tensor) -> Tensor:
        return add(x, shift_window_inverse(self.blend(x)))

    def flops(self, n: int, h: int, w: int) -> float:
        hp, wp = self.window.padded(h, w)
        e = self.window.E
        hh, ww = hp // e, wp // e
        return self.fp.flops(n, hh, ww) + self.gla.flops(n, hh, ww) + self.caa.flops(n, hh, ww)


class HDDAConv(Module):
    """Windowed hybrid dual attention with two diagonally offset context-anchor paths.

    Main path: AHDDA(FP(F), F) on F = window_divide(x). Each auxiliary path
    rolls x (and the spatial map of FP(F)) by +/-(s, s), windows both, gates
    with its own CAA, merges and rolls back. The three aligned maps are summed,
    passed through a 3x3 conv and added to x.
    """

    def __init__(self, channels: int, expansion: int, shift: int | None = None,
                 reduction: int = 4, strip: int = 11, zero_init: bool = True, rng=None):
        self.channels = channels
        self.window = ShiftWindowConfig(expansion, shift, shift)
        k = channels * expansion * expansion
        self.fp = FrequencyProcessor(k, rng=rng)
        self.ahdda = HybridDualAttention(k, reduction, rng=rng)
        self.caa_pos = ContextAnchorAttention(k, strip, rng=rng)
        self.caa_neg = ContextAnchorAttention(k, strip, rng=rng)
        self.fuse = Conv2d(channels, channels, 3, init="zeros" if zero_init else "he", rng=rng)

    def offset(self, h: int, w: int) -> int:
        sr, sc = self.window.resolve_shift(h, w)
        return min(sr, sc)

    def paths(self, x: Tensor) -> Tensor:
        """Sum of the main and the two offset paths, at x's resolution (before the 3x3 conv)."""
        cfg = ShiftWindowConfig(self.window.E, 0, 0)
        f = window_divide(x, cfg)
        fp = self.fp(f.data)
        total = window_merge(WindowedFeature(self.ahdda(fp, f.data), f.origin, cfg))
        s = self.offset(*x.shape[-2:])
        if s == 0:
            fp_map = None
        else:
            fp_map = window_merge(WindowedFeature(fp, f.origin, cfg))
        for sign, caa in ((1, self.caa_pos), (-1, self.caa_neg)):
            if s == 0:
                gated = caa(fp, f.data)
                total = add(total, window_merge(WindowedFeature(gated, f.origin, cfg)))
                continue
            shift = (sign * s, sign * s)
            fs = window_divide(roll(x, shift), cfg)
            fps = window_divide(roll(fp_map, shift), cfg)
            merged = window_merge(WindowedFeature(caa(fps.data, fs.data), f.origin, cfg))
            total = add(total, roll(merged, (-sign * s, -sign * s)))
        return total

    def forward(self, x: Tensor) -> Tensor:
        return add(x, self.fuse(self.paths(x)))

    def flops(self, n: int, h: int, w: int) -> float:
        hp, wp = self.window.padded(h, w)
        e = self.window.E
        hh, ww = hp // e, wp // e
        return (self.fp.flops(n, hh, ww) + self.ahdda.flops(n, hh, ww)
                + self.caa_pos.flops(n, hh, ww) + self.caa_neg.flops(n, hh, ww)
                + self.fuse.flops(n, h, w))


class HDCTransformer(Module):
    """Pre-norm transformer block whose queries pass through the frequency processor.

    x1 = x + Attn(q=FP(LN(x)), kv=LN(x));  out = x1 + FFN(LN(x1)).
    """

    def __init__(self, dim: int, ffn_expand: float = 2, heads: int | None = None,
                 zero_init: bool = True, rng=None):
        self.dim = dim
        hidden = int(round(dim * ffn_expand))
        self.norm1 = LayerNorm2d(dim)
        self.fp = FrequencyProcessor(dim, rng=rng)
        self.attn = ChannelCrossAttention(dim, heads, rng=rng)
        if zero_init:
            self.attn.proj = Conv2d(dim, dim, 1, init="zeros")
        self.norm2 = LayerNorm2d(dim)
        self.ffn_in = Conv2d(dim, hidden, 1, rng=rng)
        self.ffn_out = Conv2d(hidden, dim, 1, init="zeros" if zero_init else "he", rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n = self.norm1(x)
        x1 = add(x, self.attn(self.fp(n), n))
        return add(x1, self.ffn_out(gelu(self.ffn_in(self.norm2(x1)))))

    def flops(self, n: int, h: int, w: int) -> float:
        return (self.fp.flops(n, h, w) + self.attn.flops(n, h, w)
                + self.ffn_in.flops(n, h, w) + self.ffn_out.flops(n, h, w))


class PlainBlock(Module):
    """x + Conv3x3(ReLU(Conv3x3(x))); the stand-in used by ablation variants."""

    def __init__(self, channels: int, zero_init: bool = True, rng=None):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, init="zeros" if zero_init else "he", rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return add(x, self.conv2(relu(self.conv1(x))))

    def flops(self, n: int, h: int, w: int) -> float:
        return self.conv1.flops(n, h, w) + self.conv2.flops(n, h, w)


class DoubleOut(Module):
    """Two 3x3 heads: highlight-free estimate (added to the input image) and specular residual."""

    def __init__(self, channels: int, out_channels: int = 3, zero_init: bool = True, rng=None):
        init = "zeros" if zero_init else "he"
        self.head_clean = Conv2d(channels, out_channels, 3, init=init, rng=rng)
        self.head_residual = Conv2d(channels, out_channels, 3, init=init, rng=rng)

    def forward(self, features: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        return add(image, self.head_clean(features)), self.head_residual(features)

    def flops(self, n: int, h: int, w: int) -> float:
        return self.head_clean.flops(n, h, w) + self.head_residual.flops(n, h, w)


class SingleOut(Module):
    """One head; the residual is reported as ``image - clean`` and carries no gradient signal."""

    def __init__(self, channels: int, out_channels: int = 3, zero_init: bool = True, rng=None):
        self.head_clean = Conv2d(channels, out_channels, 3, init="zeros" if zero_init else "he", rng=rng)

    def forward(self, features: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        clean = add(image, self.head_clean(features))
        return clean, sub(image, clean)

    def flops(self, n: int, h: int, w: int) -> float:
        return self.head_clean.flops(n, h, w)


class Downsample(Module):
    """3x3 stride-2 conv, C -> 2C."""

    def __init__(self, channels: int, rng=None):
        self.conv = Conv2d(channels, 2 * channels, 3, stride=2, padding=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)

    def flops(self, n: int, h: int, w: int) -> float:
        return self.conv.flops(n, h, w)


class Upsample(Module):
    """2x nearest-neighbour upsampling then 3x3 conv, C -> C/2."""

    def __init__(self, channels: int, rng=None):
        self.conv = Conv2d(channels, channels // 2, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(upsample_nearest(x, 2))

    def flops(self, n: int, h: int, w: int) -> float:
        return self.conv.flops(n, 2 * h, 2 * w)
