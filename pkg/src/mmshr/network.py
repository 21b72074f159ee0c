"""U-shaped encoder-decoder assembled from the restoration blocks."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .blocks import (
    DoubleOut,
    Downsample,
    HDCTransformer,
    HDDAConv,
    OAIBlock,
    PlainBlock,
    SingleOut,
    Upsample,
)
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor, concat

__all__ = ["ModelConfig", "ParamStore", "SHRNet", "build_model", "count_params", "count_flops"]

CANONICAL_TYPES = ("oai", "hdda", "hdct", "hdct")
BLOCK_TYPES = ("oai", "hdda", "hdct", "plain")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The four levels run at H, H/2, H/4 and H/8 with widths C0, 2C0, 4C0, 8C0.
    ``expansion`` gives the window expansion factor E of the two windowed levels.
    Attention levels use dim/16 heads, so 4*C0 must be a multiple of 16.
    """

    base_channels: int = 8
    level_blocks: tuple[int, int, int, int] = (3, 1, 2, 2)
    level_types: tuple[str, str, str, str] = CANONICAL_TYPES
    expansion: tuple[int, int] = (4, 8)
    ffn_expand: float = 2.0
    input_channels: int = 3
    reduction: int = 4
    strip_kernel: int = 11
    double_out: bool = True

    def __post_init__(self):
        object.__setattr__(self, "level_blocks", tuple(int(b) for b in self.level_blocks))
        object.__setattr__(self, "level_types", tuple(self.level_types))
        object.__setattr__(self, "expansion", tuple(int(e) for e in self.expansion))
        self.validate()

    @property
    def level_channels(self) -> tuple[int, ...]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def validate(self) -> None:
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if len(self.level_blocks) != 4 or len(self.level_types) != 4:
            raise ConfigError("level_blocks and level_types must each have 4 entries")
        if any(b < 0 for b in self.level_blocks):
            raise ConfigError(f"negative block count in {self.level_blocks}")
        if len(self.expansion) != 2 or min(self.expansion) < 1:
            raise ConfigError(f"expansion must be two positive factors, got {self.expansion}")
        for level, (kind, canon) in enumerate(zip(self.level_types, CANONICAL_TYPES)):
            if kind not in (canon, "plain"):
                raise ConfigError(f"level {level} must be {canon!r} or 'plain', got {kind!r}")
        for level in (2, 3):
            dim = self.level_channels[level]
            if self.level_types[level] == "hdct" and dim % 16:
                raise ConfigError(f"level {level} width {dim} is not a multiple of 16 (heads = dim/16)")
        for level in (0, 1):
            if self.level_types[level] != "plain":
                k = self.level_channels[level] * self.expansion[level] ** 2
                if k % self.reduction:
                    raise ConfigError(f"level {level} windowed width {k} not divisible by r={self.reduction}")

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        for key in ("level_blocks", "level_types", "expansion"):
            raw[key] = tuple(raw[key])
        return cls(**raw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small preset that trains on one CPU core in minutes at 64x64."""
        return cls(base_channels=8, level_blocks=(1, 1, 1, 1), expansion=(4, 2))


@dataclass
class ParamStore:
    """Ordered name -> tensor map of trainable parameters plus non-trainable buffers."""

    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_module(cls, model: Module) -> "ParamStore":
        store = cls()
        for name, p in model.named_parameters():
            if name in store.params:
                raise ConfigError(f"duplicate parameter name {name}")
            store.params[name] = p
        for name, b in model.named_buffers():
            store.buffers[name] = b
        return store

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _make_block(kind: str, channels: int, level: int, cfg: ModelConfig, rng) -> Module:
    if kind == "oai":
        return OAIBlock(channels, cfg.expansion[0], reduction=cfg.reduction, strip=cfg.strip_kernel, rng=rng)
    if kind == "hdda":
        return HDDAConv(channels, cfg.expansion[1], reduction=cfg.reduction, strip=cfg.strip_kernel, rng=rng)
    if kind == "hdct":
        return HDCTransformer(channels, cfg.ffn_expand, rng=rng)
    return PlainBlock(channels, rng=rng)


class SHRNet(Module):
    """Four-level U-Net: OAIBlock / HDDAConv / HDCTransformer x2, mirrored decoder, two output heads."""

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        ch = cfg.level_channels
        self.stem = Conv2d(cfg.input_channels, ch[0], 3, rng=rng)
        self.enc = ModuleList()
        self.down = ModuleList()
        for level in range(3):
            self.enc.append(ModuleList(_make_block(cfg.level_types[level], ch[level], level, cfg, rng)
                                       for _ in range(cfg.level_blocks[level])))
            self.down.append(Downsample(ch[level], rng=rng))
        self.bottleneck = ModuleList(_make_block(cfg.level_types[3], ch[3], 3, cfg, rng)
                                     for _ in range(cfg.level_blocks[3]))
        self.up = ModuleList()
        self.fuse = ModuleList()
        self.dec = ModuleList()
        for level in (2, 1, 0):
            self.up.append(Upsample(ch[level + 1], rng=rng))
            self.fuse.append(Conv2d(2 * ch[level], ch[level], 1, rng=rng))
            self.dec.append(ModuleList(_make_block(cfg.level_types[level], ch[level], level, cfg, rng)
                                       for _ in range(cfg.level_blocks[level])))
        head = DoubleOut if cfg.double_out else SingleOut
        self.head = head(ch[0], cfg.input_channels, rng=rng)

    def features(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"expected (N, {self.cfg.input_channels}, H, W) input, got {image.shape}")
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"axes 2/3: spatial size {h}x{w} must be divisible by 8")
        x = self.stem(image)
        skips = []
        for blocks, down in zip(self.enc, self.down):
            for blk in blocks:
                x = blk(x)
            skips.append(x)
            x = down(x)
        for blk in self.bottleneck:
            x = blk(x)
        for up, fuse, blocks, skip in zip(self.up, self.fuse, self.dec, reversed(skips)):
            x = fuse(concat([up(x), skip], axis=1))
            for blk in blocks:
                x = blk(x)
        return x

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        return self.head(self.features(image), image)

    def flops(self, n: int, h: int, w: int) -> float:
        total = self.stem.flops(n, h, w)
        sizes = [(h >> level, w >> level) for level in range(4)]
        for level in range(3):
            hh, ww = sizes[level]
            total += sum(b.flops(n, hh, ww) for b in self.enc[level])
            total += self.down[level].flops(n, hh, ww)
        total += sum(b.flops(n, *sizes[3]) for b in self.bottleneck)
        for i, level in enumerate((2, 1, 0)):
            hh, ww = sizes[level]
            total += self.up[i].flops(n, *sizes[level + 1])
            total += self.fuse[i].flops(n, hh, ww)
            total += sum(b.flops(n, hh, ww) for b in self.dec[i])
        return total + self.head.flops(n, h, w)


def build_model(cfg: ModelConfig, seed: int = 0) -> tuple[ParamStore, SHRNet]:
    """Deterministic construction: He-normal convs, zero biases, zero residual-branch ends."""
    cfg.validate()
    model = SHRNet(cfg, np.random.default_rng(seed))
    return ParamStore.from_module(model), model


def count_params(store: ParamStore | Module) -> int:
    if isinstance(store, Module):
        store = ParamStore.from_module(store)
    return store.count()


def count_flops(cfg: ModelConfig, h: int, w: int, batch: int = 1) -> int:
    """Analytic FLOPs (2 x MACs for conv/matmul, 5*HW*log2(HW) per FFT plane).

    Elementwise operations, normalizations and pooling reductions are not counted.
    """
    _, model = build_model(cfg, seed=0)
    return int(round(model.flops(batch, h, w)))
