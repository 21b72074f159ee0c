"""Losses, AdamW, the cosine schedule, PSNR/SSIM and the epoch loop."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .functional import conv2d
from .network import ParamStore
from .nn import NO_DECAY, Conv2d, Module
from .tensor import (
    Tensor,
    add,
    concat,
    crop,
    default_dtype,
    div,
    max_,
    mean,
    mse_reduce,
    mul,
    no_grad,
    relu,
    reshape,
    sub,
)

__all__ = [
    "LossWeights",
    "ScheduleConfig",
    "OptimState",
    "AdamW",
    "optim_step",
    "cosine_lr",
    "loss_mse",
    "loss_ssim",
    "ssim_map",
    "loss_perceptual",
    "loss_total",
    "weighted_total",
    "FeatureExtractor",
    "default_extractor",
    "load_extractor",
    "metric_psnr",
    "metric_ssim",
    "EpochRecord",
    "ValReport",
    "LOG_FIELDS",
    "evaluate",
    "fit",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss terms. Not to be confused with the learnable
    blend scalars inside the blocks, which share Greek letters in the literature."""

    mse1: float = 1.0
    mse2: float = 1.5
    ssim: float = 0.4
    vgg: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be >= 0, got {v}")


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    total_epochs: int = 100
    batch: int = 16

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_epochs < 1 or self.batch < 1:
            raise ConfigError("total_epochs and batch must be positive")


def cosine_lr(epoch: float, cfg: ScheduleConfig) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * t)) / 2 with t = epoch / total.

    Each floating-point step is monotone in the cosine factor, so the sequence
    never increases; the clamp absorbs the last-bit overshoot of
    ``lr_min + (lr_max - lr_min)``, and epoch 0 returns ``lr_max`` itself.
    """
    if not 0 <= epoch <= cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch == 0:
        return cfg.lr_max
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))
    lr = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * c
    return min(cfg.lr_max, max(cfg.lr_min, lr))


# -- losses ------------------------------------------------------------

def loss_mse(a: Tensor, b: Tensor) -> Tensor:
    return mse_reduce(a, b)


def _gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _gauss_filter(x: Tensor) -> Tensor:
    """Valid-mode separable Gaussian over each channel."""
    c = x.shape[1]
    g = _gaussian_1d().astype(x.dtype)
    gh = Tensor(np.tile(g.reshape(1, 1, 1, -1), (c, 1, 1, 1)))
    gv = Tensor(np.tile(g.reshape(1, 1, -1, 1), (c, 1, 1, 1)))
    return conv2d(conv2d(x, gh, groups=c), gv, groups=c)


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM over valid 11x11 windows, one map per channel."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"axes 2/3: {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c = a.shape[1]
    stats = _gauss_filter(concat([a, b, mul(a, a), mul(b, b), mul(a, b)], axis=1))

    def part(k: int) -> Tensor:
        return crop(stats, (slice(None), slice(k * c, (k + 1) * c)))

    mu_a, mu_b, e_aa, e_bb, e_ab = (part(k) for k in range(5))
    mu_aa, mu_bb, mu_ab = mul(mu_a, mu_a), mul(mu_b, mu_b), mul(mu_a, mu_b)
    var_a, var_b, cov = sub(e_aa, mu_aa), sub(e_bb, mu_bb), sub(e_ab, mu_ab)
    num = mul(add(mul(2.0, mu_ab), SSIM_C1), add(mul(2.0, cov), SSIM_C2))
    den = mul(add(add(mu_aa, mu_bb), SSIM_C1), add(add(var_a, var_b), SSIM_C2))
    return div(num, den)


def loss_ssim(a: Tensor, b: Tensor) -> Tensor:
    return sub(1.0, mean(ssim_map(a, b)))


class FeatureExtractor(Module):
    """Frozen conv stack whose three taps stand in for VGG16 relu1_2/relu2_2/relu3_3.

    The default is 3->16->32->64 with a stride-2 conv opening stages two and
    three, no biases, ReLU after every conv, fixed seed. ``vgg16_layout``
    builds the real VGG16 shape (max-pool between stages, biases) so that
    externally supplied weights can be dropped in with :func:`load_extractor`.
    """

    def __init__(self, stages: Sequence[Sequence[int]] = ((16, 16), (32, 32), (64, 64, 64)),
                 in_channels: int = 3, downsample: str = "stride", bias: bool = False, seed: int = 1234):
        if downsample not in ("stride", "maxpool"):
            raise ConfigError(f"downsample must be 'stride' or 'maxpool', got {downsample!r}")
        rng = np.random.default_rng(seed)
        self.stages = tuple(tuple(s) for s in stages)
        self.downsample = downsample
        self.in_channels = in_channels
        self.bias = bias
        self._convs: list[tuple[int, int, Conv2d]] = []
        c = in_channels
        for si, widths in enumerate(self.stages):
            for ci, width in enumerate(widths):
                stride = 2 if (si > 0 and ci == 0 and downsample == "stride") else 1
                conv = Conv2d(c, width, 3, stride=stride, padding=1, bias=bias, rng=rng)
                for p in conv.parameters():
                    p.requires_grad = False
                setattr(self, f"conv{si + 1}_{ci + 1}", conv)
                self._convs.append((si, ci, conv))
                c = width

    @classmethod
    def vgg16_layout(cls) -> "FeatureExtractor":
        return cls(((64, 64), (128, 128), (256, 256, 256)), downsample="maxpool", bias=True)

    def describe(self) -> str:
        return repr({"stages": self.stages, "downsample": self.downsample, "bias": self.bias})

    def named_weights(self):
        """Frozen weights by name (``named_parameters`` only lists trainable tensors)."""
        for si, ci, conv in self._convs:
            prefix = f"conv{si + 1}_{ci + 1}"
            yield f"{prefix}.weight", conv.weight
            if conv.bias is not None:
                yield f"{prefix}.bias", conv.bias

    def forward(self, x: Tensor) -> list[Tensor]:
        taps = []
        for si, ci, conv in self._convs:
            if si > 0 and ci == 0 and self.downsample == "maxpool":
                x = _max_pool2(x)
            x = relu(conv(x))
            if ci == len(self.stages[si]) - 1:
                taps.append(x)
        return taps


def _max_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    x = crop(x, (slice(None), slice(None), slice(0, h - h % 2), slice(0, w - w % 2)))
    t = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return max_(t, axis=(3, 5))


def load_extractor(path, template: FeatureExtractor | None = None) -> FeatureExtractor:
    """Fill ``template`` (default: the VGG16 layout) from a checkpoint-format file.

    Records are matched by name (``conv1_1.weight``, ``conv1_1.bias``, ...).
    """
    from .data_io import read_records

    ext = template if template is not None else FeatureExtractor.vgg16_layout()
    _, records, _ = read_records(path)
    named = dict(ext.named_weights())
    missing = set(named) - set(records)
    if missing:
        raise ConfigError(f"extractor weights missing: {sorted(missing)}")
    for name, t in named.items():
        arr = records[name]
        if arr.shape != t.shape:
            raise ShapeError(f"{name}: file has {arr.shape}, extractor expects {t.shape}")
        t.data = arr.astype(t.dtype)
    return ext


def loss_perceptual(a: Tensor, b: Tensor, extractor: FeatureExtractor) -> Tensor:
    """(1/N) sum over taps of the mean squared feature difference, N = number of taps.

    ``b`` is treated as a target: its features are computed without a tape.
    """
    fa = extractor(a)
    with no_grad():
        fb = extractor(b.detach() if isinstance(b, Tensor) else Tensor(b))
    total = None
    for x, y in zip(fa, fb):
        term = mse_reduce(x, y)
        total = term if total is None else add(total, term)
    return div(total, float(len(fa)))


def weighted_total(components: Mapping[str, float] | Sequence[float], weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of (mse1, mse2, ssim, vgg) scalars in float64."""
    if isinstance(components, Mapping):
        components = [components[k] for k in ("mse1", "mse2", "ssim", "vgg")]
    c1, c2, c3, c4 = (float(v) for v in components)
    return weights.mse1 * c1 + weights.mse2 * c2 + weights.ssim * c3 + weights.vgg * c4


def loss_total(out1: Tensor, out2: Tensor, gt: Tensor, inp: Tensor,
               weights: LossWeights = LossWeights(),
               extractor: FeatureExtractor | None = None) -> tuple[Tensor, dict[str, float]]:
    """w1*MSE(Out1, GT) + w2*MSE(Out1 + Out2, Input) + w3*L_SSIM(Out1, GT) + w4*L_VGG(Out1, GT).

    Returns the taped total and the unweighted components as floats.
    """
    if not (out1.shape == out2.shape == gt.shape == inp.shape):
        raise ShapeError(f"loss operands differ: {out1.shape}, {out2.shape}, {gt.shape}, {inp.shape}")
    terms = {
        "mse1": loss_mse(out1, gt),
        "mse2": loss_mse(add(out1, out2), inp),
        "ssim": loss_ssim(out1, gt),
    }
    if weights.vgg > 0 or extractor is not None:
        terms["vgg"] = loss_perceptual(out1, gt, extractor or default_extractor(out1.dtype))
    else:
        terms["vgg"] = Tensor(np.zeros((), dtype=out1.dtype))
    total = None
    for key in ("mse1", "mse2", "ssim", "vgg"):
        w = getattr(weights, key)
        if w == 0:
            continue
        term = mul(float(w), terms[key])
        total = term if total is None else add(total, term)
    if total is None:
        total = mul(0.0, terms["mse1"])
    return total, {k: float(v.item()) for k, v in terms.items()}


_EXTRACTORS: dict = {}


def default_extractor(dtype=np.float32) -> FeatureExtractor:
    key = np.dtype(dtype).name
    if key not in _EXTRACTORS:
        with default_dtype(dtype):
            _EXTRACTORS[key] = FeatureExtractor()
    return _EXTRACTORS[key]


# -- optimizer ---------------------------------------------------------

@dataclass
class OptimState:
    step: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _decays(name: str, no_decay: Iterable[str]) -> bool:
    return name.rsplit(".", 1)[-1] not in no_decay


class AdamW:
    """Adam with decoupled weight decay; blend scalars and the attention temperature are not decayed."""

    def __init__(self, params: ParamStore | Iterable[tuple[str, Tensor]], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2, no_decay: Iterable[str] = NO_DECAY,
                 state: OptimState | None = None):
        items = params.params.items() if isinstance(params, ParamStore) else params
        self.params: OrderedDict[str, Tensor] = OrderedDict(items)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = tuple(no_decay)
        self.state = state if state is not None else OptimState()
        for name, p in self.params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and _decays(name, self.no_decay):
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)


def optim_step(store: ParamStore, opt: AdamW, lr: float) -> ParamStore:
    opt.step(lr)
    return store


# -- metrics -----------------------------------------------------------

def metric_psnr(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr operands differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def metric_ssim(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ: {a.shape} vs {b.shape}")
    while a.ndim < 4:
        a, b = a[None], b[None]
    with no_grad():
        return float(ssim_map(Tensor(a), Tensor(b)).data.mean())


# -- loop --------------------------------------------------------------

LOG_FIELDS = ("epoch", "lr", "loss_total", "loss_mse1", "loss_mse2", "loss_ssim", "loss_vgg",
              "val_psnr", "val_ssim")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_mse1: float
    loss_mse2: float
    loss_ssim: float
    loss_vgg: float
    val_psnr: float
    val_ssim: float

    def row(self) -> str:
        vals = [str(self.epoch)] + [f"{getattr(self, k):.8g}" for k in LOG_FIELDS[1:]]
        return "\t".join(vals)

    @staticmethod
    def header() -> str:
        return "\t".join(LOG_FIELDS)


@dataclass
class ValReport:
    psnr: float
    ssim: float
    input_psnr: float
    decomposition_error: float
    residual_mean: float
    per_image: list[tuple[float, float]]


def evaluate(model: Module, inputs: np.ndarray, gts: np.ndarray, batch: int = 8) -> ValReport:
    """Eval-mode metrics of Out1 against GT, averaged over images."""
    was_training = model.training
    model.eval()
    per_image, base, decomp, resid = [], [], [], []
    try:
        with no_grad():
            for start in range(0, len(inputs), batch):
                x = inputs[start:start + batch]
                y = gts[start:start + batch]
                out1, out2 = model(Tensor(x))
                o1, o2 = out1.data, out2.data
                for i in range(len(x)):
                    per_image.append((metric_psnr(o1[i], y[i]), metric_ssim(o1[i], y[i])))
                    base.append(metric_psnr(x[i], y[i]))
                decomp.append(np.abs(o1 + o2 - x).astype(np.float64).mean(axis=(1, 2, 3)))
                resid.append(np.abs(o2).astype(np.float64).mean(axis=(1, 2, 3)))
    finally:
        model.train(was_training)
    arr = np.asarray(per_image)
    return ValReport(psnr=float(arr[:, 0].mean()), ssim=float(arr[:, 1].mean()),
                     input_psnr=float(np.mean(base)),
                     decomposition_error=float(np.concatenate(decomp).mean()),
                     residual_mean=float(np.concatenate(resid).mean()),
                     per_image=per_image)


def fit(model: Module, train_inputs: np.ndarray, train_gts: np.ndarray,
        val_inputs: np.ndarray, val_gts: np.ndarray, sched: ScheduleConfig,
        weights: LossWeights = LossWeights(), optimizer: AdamW | None = None,
        extractor: FeatureExtractor | None = None, seed: int = 0, start_epoch: int = 0,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[list[EpochRecord], ValReport, AdamW]:
    """Train for ``sched.total_epochs`` epochs; lr is held per epoch at cosine_lr(epoch)."""
    store = ParamStore.from_module(model)
    opt = optimizer if optimizer is not None else AdamW(store)
    extractor = extractor or default_extractor(np.float32)
    rng = np.random.default_rng(seed)
    history: list[EpochRecord] = []
    report = None
    model.train()
    for epoch in range(start_epoch, sched.total_epochs):
        lr = cosine_lr(epoch, sched)
        sums = dict.fromkeys(("total", "mse1", "mse2", "ssim", "vgg"), 0.0)
        seen = 0
        order = rng.permutation(len(train_inputs))
        for start in range(0, len(order), sched.batch):
            idx = order[start:start + sched.batch]
            x = Tensor(train_inputs[idx])
            y = Tensor(train_gts[idx])
            opt.zero_grad()
            out1, out2 = model(x)
            total, parts = loss_total(out1, out2, y, x, weights, extractor)
            value = float(total.item())
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch + 1}, batch {start // sched.batch}")
            total.backward()
            opt.step(lr)
            k = len(idx)
            seen += k
            sums["total"] += value * k
            for key, v in parts.items():
                sums[key] += v * k
        report = evaluate(model, val_inputs, val_gts, batch=sched.batch)
        rec = EpochRecord(epoch + 1, lr, sums["total"] / seen, sums["mse1"] / seen, sums["mse2"] / seen,
                          sums["ssim"] / seen, sums["vgg"] / seen, report.psnr, report.ssim)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    if report is None:
        report = evaluate(model, val_inputs, val_gts, batch=sched.batch)
    return history, report, opt
