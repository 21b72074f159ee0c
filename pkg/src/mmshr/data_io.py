"""Synthetic highlight pairs, image files, datasets and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"MMSHR001"                      magic
    u64  total file length           lets truncation be told apart from corruption
    u32  config length, config text  canonical ModelConfig text (UTF-8)
    u32  record count, records       parameters and buffers
    u8   has optimizer state
         [u64 step, u32 count, records]   first/second moments named m/<p>, v/<p>
    u32  CRC-32 of every preceding byte

A record is ``u16 name length, name, u8 dtype tag, u8 ndim, ndim x u32 extents,
raw scalars``.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter, zoom

from .errors import (
    ChecksumError,
    ConfigError,
    ConfigMismatchError,
    ImageFormatError,
    MagicMismatchError,
    TruncatedCheckpointError,
)
from .network import ModelConfig, ParamStore, SHRNet
from .tensor import Tensor
from .training import OptimState

__all__ = [
    "SamplePair",
    "synth_pair",
    "SynthDataset",
    "ManifestDataset",
    "parse_data_spec",
    "open_dataset",
    "iterate_batches",
    "load_image",
    "save_image",
    "write_manifest",
    "OptimState",
    "write_records",
    "read_records",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
    "restore_model",
    "MAGIC",
]

MAGIC = b"MMSHR001"
GT_CEILING = 0.4
RESIDUAL_CEILING = 1.0 - GT_CEILING


# -- synthetic pairs ---------------------------------------------------

@dataclass
class SamplePair:
    input: np.ndarray
    gt: np.ndarray
    residual: np.ndarray


def _diffuse_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    base = rng.uniform(0.2, 0.8, size=3)
    slopes = rng.normal(0.0, 0.25, size=(3, 2))
    ramp = base[:, None, None] + slopes[:, 0, None, None] * yy + slopes[:, 1, None, None] * xx
    coarse = rng.normal(size=(3, max(h // 8, 2), max(w // 8, 2)))
    noise = zoom(coarse, (1, h / coarse.shape[1], w / coarse.shape[2]), order=3)[:, :h, :w]
    noise = gaussian_filter(noise, sigma=(0, 1.0, 1.0))
    fine = gaussian_filter(rng.normal(size=(3, h, w)), sigma=(0, 1.5, 1.5))
    tex = ramp + 0.15 * noise + 0.05 * fine
    lo, hi = tex.min(), tex.max()
    tex = (tex - lo) / (hi - lo) if hi > lo else np.zeros_like(tex)
    return tex * GT_CEILING


def _specular_lobes(rng: np.random.Generator, h: int, w: int, count: int,
                    intensity_range: tuple[float, float]) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    out = np.zeros((3, h, w))
    side = min(h, w)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s1, s2 = rng.uniform(side / 24, side / 7, size=2)
        theta = rng.uniform(0, np.pi)
        peak = rng.uniform(*intensity_range)
        # weakly chromatic: channels within ~8% of white
        tint = 1.0 - rng.uniform(0.0, 0.08, size=3)
        tint /= tint.max()
        c, s = np.cos(theta), np.sin(theta)
        dy, dx = yy - cy, xx - cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        lobe = np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
        out += peak * tint[:, None, None] * lobe[None]
    top = out.max()
    if top > RESIDUAL_CEILING:
        out *= RESIDUAL_CEILING / top
    return out


def synth_pair(seed: int, h: int = 64, w: int = 64, n_highlights: int = 3,
               intensity_range: tuple[float, float] = (0.3, 0.6)) -> SamplePair:
    """Diffuse texture in [0, 0.4] plus near-white anisotropic Gaussian highlights.

    Overlapping lobes are rescaled so the residual never exceeds 0.6, which
    keeps ``input = gt + residual`` at or below 1 without clipping.
    """
    if h % 8 or w % 8 or h <= 0 or w <= 0:
        raise ConfigError(f"image size {h}x{w} must be positive multiples of 8")
    lo, hi = intensity_range
    if not (0 < lo <= hi <= RESIDUAL_CEILING):
        raise ConfigError(f"intensity_range {intensity_range} must lie in (0, {RESIDUAL_CEILING}]")
    if n_highlights < 0:
        raise ConfigError(f"n_highlights must be >= 0, got {n_highlights}")
    rng = np.random.default_rng(seed)
    gt = _diffuse_texture(rng, h, w).astype(np.float32)
    residual = _specular_lobes(rng, h, w, n_highlights, (lo, hi)).astype(np.float32)
    return SamplePair(input=gt + residual, gt=gt, residual=residual)


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class SynthDataset:
    """``n`` generated pairs; pair ``i`` depends only on (seed, i).

    By default every sixth pair carries no highlight so the residual head also
    sees the empty case. ``empty_every=0`` gives highlights on every pair.
    """

    def __init__(self, n: int, h: int = 64, w: int = 64, seed: int = 0,
                 max_highlights: int = 4, intensity_range: tuple[float, float] = (0.3, 0.6),
                 empty_every: int = 6):
        if n < 1:
            raise ConfigError(f"dataset size must be positive, got {n}")
        if empty_every < 0:
            raise ConfigError(f"empty_every must be >= 0, got {empty_every}")
        self.n, self.h, self.w, self.seed = n, h, w, seed
        self.empty_every = empty_every
        self.max_highlights = max_highlights
        self.intensity_range = intensity_range

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> SamplePair:
        if not 0 <= i < self.n:
            raise IndexError(i)
        s = _child_seed(self.seed, i)
        empty = self.empty_every and i % self.empty_every == self.empty_every - 1
        count = 0 if empty else int(np.random.default_rng(s + 1).integers(1, self.max_highlights + 1))
        return synth_pair(s, self.h, self.w, count, self.intensity_range)

    def name(self, i: int) -> str:
        return f"synth_{i:05d}"

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self[i] for i in range(self.n)]
        return np.stack([p.input for p in pairs]), np.stack([p.gt for p in pairs])


class ManifestDataset:
    """Paired files listed one per line as ``input_path<TAB>gt_path``."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            text = self.path.read_text()
        except OSError as exc:
            raise ImageFormatError(f"cannot read manifest {self.path}: {exc}") from exc
        self.entries: list[tuple[Path, Path]] = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ImageFormatError(f"{self.path}:{lineno}: expected input<TAB>gt")
            a, b = (Path(p) if Path(p).is_absolute() else self.path.parent / p for p in parts)
            self.entries.append((a, b))
        if not self.entries:
            raise ImageFormatError(f"manifest {self.path} lists no pairs")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> SamplePair:
        a, b = self.entries[i]
        inp, gt = load_image(a), load_image(b)
        if inp.shape != gt.shape:
            raise ImageFormatError(f"{a} and {b} differ in size: {inp.shape} vs {gt.shape}")
        return SamplePair(input=inp, gt=gt, residual=inp - gt)

    def name(self, i: int) -> str:
        return self.entries[i][0].stem

    def materialize(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self[i] for i in range(len(self))]
        return np.stack([p.input for p in pairs]), np.stack([p.gt for p in pairs])


def parse_data_spec(spec: str) -> tuple[str, dict]:
    """``synth:N,HxW`` or a manifest path."""
    if spec.startswith("synth:"):
        body = spec[len("synth:"):]
        try:
            count, size = body.split(",")
            h, w = (int(v) for v in size.lower().split("x"))
            return "synth", {"n": int(count), "h": h, "w": w}
        except ValueError as exc:
            raise ConfigError(f"bad synthetic data spec {spec!r}; expected synth:N,HxW") from exc
    return "manifest", {"path": spec}


def open_dataset(spec: str, seed: int = 0):
    kind, args = parse_data_spec(spec)
    if kind == "synth":
        return SynthDataset(args["n"], args["h"], args["w"], seed=seed)
    return ManifestDataset(args["path"])


def iterate_batches(inputs: np.ndarray, targets: np.ndarray, batch: int,
                    rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (when ``rng`` is given) mini-batches; the last short batch is kept."""
    order = rng.permutation(len(inputs)) if rng is not None else np.arange(len(inputs))
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        yield inputs[idx], targets[idx]


# -- image files -------------------------------------------------------

_FORMATS = {"PNG", "PPM"}


def load_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB PNG or binary PPM -> float32 (3, H, W) in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            fmt, mode = img.format, img.mode
            if fmt not in _FORMATS:
                raise ImageFormatError(f"{path}: unsupported format {fmt}; expected PNG or PPM")
            if mode not in ("RGB", "RGBA", "L", "P"):
                raise ImageFormatError(f"{path}: unsupported pixel mode {mode}; expected 8-bit RGB")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def save_image(image: np.ndarray, path: str | os.PathLike) -> None:
    """Quantize by round(v * 255), clamped; format chosen from the suffix (.png / .ppm)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) image, got {arr.shape}")
    q = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    suffix = Path(path).suffix.lower()
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(suffix)
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported suffix {suffix!r}; use .png or .ppm")
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format=fmt)


def write_manifest(dataset, out_dir: str | os.PathLike) -> Path:
    """Write every pair as PNGs plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        pair = dataset[i]
        name = dataset.name(i)
        save_image(pair.input, out / f"{name}_input.png")
        save_image(pair.gt, out / f"{name}_gt.png")
        lines.append(f"{name}_input.png\t{name}_gt.png")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# -- checkpoints -------------------------------------------------------

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


def _pack_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise TypeError(f"record {name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


class _Reader:
    def __init__(self, data: bytes, start: int, end: int):
        self.data, self.pos, self.end = data, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError("checkpoint payload ends mid-record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode()
        tag, ndim = self.unpack("<BB")
        if tag not in _DTYPES:
            raise ChecksumError(f"record {name}: unknown dtype tag {tag}")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="))


def write_records(path: str | os.PathLike, config_text: str,
                  records: "OrderedDict[str, np.ndarray]", opt: OptimState | None = None) -> None:
    body = io.BytesIO()
    cfg = config_text.encode()
    body.write(struct.pack("<I", len(cfg)))
    body.write(cfg)
    body.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        _pack_record(body, name, arr)
    if opt is None:
        body.write(struct.pack("<B", 0))
    else:
        body.write(struct.pack("<BQI", 1, opt.step, 2 * len(opt.m)))
        for name, arr in opt.m.items():
            _pack_record(body, f"m/{name}", arr)
        for name, arr in opt.v.items():
            _pack_record(body, f"v/{name}", arr)
    payload = body.getvalue()
    total = len(MAGIC) + 8 + len(payload) + 4
    head = MAGIC + struct.pack("<Q", total) + payload
    blob = head + struct.pack("<I", zlib.crc32(head) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_records(path: str | os.PathLike):
    """Returns (config_text, records, optimizer state or None)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError(f"{path}: {len(data)} bytes is shorter than the header")
    if data[:len(MAGIC)] != MAGIC:
        raise MagicMismatchError(f"{path}: magic {data[:len(MAGIC)]!r} != {MAGIC!r}")
    if len(data) < len(MAGIC) + 12:
        raise TruncatedCheckpointError(f"{path}: header incomplete")
    (total,) = struct.unpack_from("<Q", data, len(MAGIC))
    if len(data) < total:
        raise TruncatedCheckpointError(f"{path}: {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise ChecksumError(f"{path}: {len(data) - total} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", data, total - 4)
    if zlib.crc32(data[:total - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch")
    r = _Reader(data, len(MAGIC) + 8, total - 4)
    (n,) = r.unpack("<I")
    config_text = r.take(n).decode()
    (count,) = r.unpack("<I")
    records: OrderedDict[str, np.ndarray] = OrderedDict(r.record() for _ in range(count))
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, k = r.unpack("<QI")
        m, v = OrderedDict(), OrderedDict()
        for _ in range(k):
            name, arr = r.record()
            (m if name.startswith("m/") else v)[name[2:]] = arr
        opt = OptimState(int(step), m, v)
    return config_text, records, opt


def save_checkpoint(store: ParamStore, opt_state: OptimState | None, cfg: ModelConfig,
                    path: str | os.PathLike) -> None:
    records: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in store.params.items():
        records[name] = p.data
    for name, b in store.buffers.items():
        records[name] = b
    write_records(path, cfg.to_text(), records, opt_state)


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamStore, OptimState | None, ModelConfig]:
    """Detached store (parameters as Tensors, buffers as arrays), optimizer state and config.

    Records whose names end in ``running_mean``/``running_var`` are buffers.
    """
    text, records, opt = read_records(path)
    cfg = ModelConfig.from_text(text)
    store = ParamStore()
    for name, arr in records.items():
        if name.endswith(("running_mean", "running_var")):
            store.buffers[name] = arr
        else:
            store.params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return store, opt, cfg


def apply_checkpoint(model: SHRNet, store: ParamStore, cfg: ModelConfig) -> None:
    """Copy a loaded store into ``model``; every check runs before the first copy."""
    if cfg.to_text() != model.cfg.to_text():
        raise ConfigMismatchError(
            f"checkpoint config {cfg.digest()} does not match model config {model.cfg.digest()}")
    target = ParamStore.from_module(model)
    if list(target.params) != list(store.params) or list(target.buffers) != list(store.buffers):
        raise ConfigMismatchError("checkpoint tensor names differ from the model's")
    for name, p in target.params.items():
        if p.shape != store.params[name].shape:
            raise ConfigMismatchError(f"{name}: shape {store.params[name].shape} vs model {p.shape}")
    for name, p in target.params.items():
        p.data = store.params[name].data.astype(p.dtype, copy=True)
    for name, b in target.buffers.items():
        b[...] = store.buffers[name]


def restore_model(path: str | os.PathLike) -> tuple[SHRNet, ParamStore, OptimState | None, ModelConfig]:
    store, opt, cfg = load_checkpoint(path)
    model = SHRNet(cfg)
    apply_checkpoint(model, store, cfg)
    return model, ParamStore.from_module(model), opt, cfg

