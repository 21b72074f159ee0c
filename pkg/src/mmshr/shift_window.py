"""Omnidirectional per-channel cyclic shift and window folding.

Channel ``i`` is rolled along direction ``DIRECTIONS[i % 8]``. The (reflect)
padded map is then cut into an E x E grid of windows, and the grid is folded
into channels: output channel ``c*E*E + wy*E + wx`` holds window (wy, wx) of
source channel ``c``. That ordering is part of the checkpoint contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, channel_roll, crop, pad, permute, reshape

__all__ = [
    "DIRECTIONS",
    "ShiftWindowConfig",
    "WindowedFeature",
    "direction_offsets",
    "omni_shift",
    "window_divide",
    "window_merge",
    "shift_window",
    "shift_window_inverse",
]

DIRECTIONS = ("Up", "Down", "Left", "Right", "Left-Up", "Right-Up", "Left-Down", "Right-Down")

_VECTORS = {
    "Up": (-1, 0),
    "Down": (1, 0),
    "Left": (0, -1),
    "Right": (0, 1),
    "Left-Up": (-1, -1),
    "Right-Up": (-1, 1),
    "Left-Down": (1, -1),
    "Right-Down": (1, 1),
}


@dataclass(frozen=True)
class ShiftWindowConfig:
    """Window expansion factor and shift magnitude.

    ``shift_rows``/``shift_cols`` left as None resolve to half the window side
    (``(H'/E) // 2`` for padded height H'), which is the default.
    """

    E: int
    shift_rows: int | None = None
    shift_cols: int | None = None
    direction_table: tuple[str, ...] = DIRECTIONS

    def __post_init__(self):
        if int(self.E) < 1:
            raise ValueError(f"window expansion factor must be >= 1, got {self.E}")
        if tuple(self.direction_table) != DIRECTIONS:
            raise ValueError("direction table must be the 8 directions in canonical order")

    def padded(self, h: int, w: int) -> tuple[int, int]:
        e = self.E
        return -(-h // e) * e, -(-w // e) * e

    def resolve_shift(self, h: int, w: int) -> tuple[int, int]:
        hp, wp = self.padded(h, w)
        sr = (hp // self.E) // 2 if self.shift_rows is None else int(self.shift_rows)
        sc = (wp // self.E) // 2 if self.shift_cols is None else int(self.shift_cols)
        return sr, sc


@dataclass
class WindowedFeature:
    data: Tensor
    origin: tuple[int, int]
    config: ShiftWindowConfig
    shift: tuple[int, int] = (0, 0)

    @property
    def shape(self):
        return self.data.shape


def direction_offsets(channels: int, shift_rows: int, shift_cols: int) -> np.ndarray:
    """(C, 2) table of per-channel (row, col) roll amounts."""
    table = np.empty((channels, 2), dtype=np.int64)
    for c in range(channels):
        dr, dc = _VECTORS[DIRECTIONS[c % 8]]
        table[c] = (dr * shift_rows, dc * shift_cols)
    return table


def omni_shift(x: Tensor, shift_rows: int, shift_cols: int, inverse: bool = False) -> Tensor:
    if shift_rows == 0 and shift_cols == 0:
        return x
    offsets = direction_offsets(x.shape[1], shift_rows, shift_cols)
    return channel_roll(x, -offsets if inverse else offsets)


def _fold(x: Tensor, e: int) -> Tensor:
    n, c, hp, wp = x.shape
    h, w = hp // e, wp // e
    t = reshape(x, (n, c, e, h, e, w))
    t = permute(t, (0, 1, 2, 4, 3, 5))
    return reshape(t, (n, c * e * e, h, w))


def _unfold(x: Tensor, e: int) -> Tensor:
    n, ce, h, w = x.shape
    c = ce // (e * e)
    t = reshape(x, (n, c, e, e, h, w))
    t = permute(t, (0, 1, 2, 4, 3, 5))
    return reshape(t, (n, c, e * h, e * w))


def window_divide(x: Tensor, cfg: ShiftWindowConfig | int) -> WindowedFeature:
    if isinstance(cfg, int):
        cfg = ShiftWindowConfig(cfg, 0, 0)
    if x.ndim != 4:
        raise ShapeError(f"window_divide expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    e = cfg.E
    if e > h or e > w:
        axis = 2 if e > h else 3
        raise ShapeError(f"axis {axis}: expansion factor {e} exceeds spatial extent {h}x{w}")
    hp, wp = cfg.padded(h, w)
    xp = pad(x, ((0, hp - h), (0, wp - w)), mode="reflect")
    return WindowedFeature(_fold(xp, e) if e > 1 else xp, (h, w), cfg)


def window_merge(f: WindowedFeature) -> Tensor:
    """Unfold windows back to the (cropped) spatial map; no shift undo."""
    e = f.config.E
    h, w = f.origin
    hp, wp = f.config.padded(h, w)
    n, ce, hh, ww = f.data.shape
    if ce % (e * e) or hh * e != hp or ww * e != wp:
        raise ShapeError(f"windowed feature {f.data.shape} inconsistent with E={e}, origin {f.origin}")
    t = _unfold(f.data, e) if e > 1 else f.data
    if (hp, wp) != (h, w):
        t = crop(t, (slice(None), slice(None), slice(0, h), slice(0, w)))
    return t


def shift_window(x: Tensor, cfg: ShiftWindowConfig) -> WindowedFeature:
    """Omnidirectional shift followed by window division; channels are stacked, not summed."""
    h, w = x.shape[-2:]
    sr, sc = cfg.resolve_shift(h, w)
    f = window_divide(omni_shift(x, sr, sc), cfg)
    f.shift = (sr, sc)
    return f


def shift_window_inverse(f: WindowedFeature) -> Tensor:
    sr, sc = f.shift
    return omni_shift(window_merge(f), sr, sc, inverse=True)
