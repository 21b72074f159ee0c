"""Central finite-difference checks of the tape, and the suite run by ``mmshr gradcheck``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import attention, blocks, functional as F, spectral, training
from . import shift_window as sw
from . import tensor as T
from .nn import Module
from .tensor import Tensor, default_dtype

__all__ = ["CheckResult", "gradcheck", "check_module", "SUITE", "run_suite"]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    skipped: int
    seconds: float
    passed: bool

    def row(self) -> str:
        return f"{self.name}\t{self.max_rel_err:.3e}\t{self.n_coords}\t{self.skipped}\t{'pass' if self.passed else 'FAIL'}"


def _outputs(value) -> list[Tensor]:
    if isinstance(value, Tensor):
        return [value]
    if isinstance(value, sw.WindowedFeature):
        return [value.data]
    if isinstance(value, spectral.ComplexPlane):
        return [value.re, value.im]
    return [t for v in value for t in _outputs(v)]


def gradcheck(fn: Callable[..., object], leaves: Sequence[Tensor], n_coords: int = 32, h: float = 1e-4,
              tol: float = 1e-4, seed: int = 0, name: str = "fn") -> CheckResult:
    """Compare tape gradients of a random projection of ``fn()`` with central differences.

    ``fn`` takes no arguments and reads the float64 ``leaves``. Every leaf gets
    at least one sampled coordinate, then ``n_coords`` more are drawn uniformly
    over all elements. A coordinate whose central differences at h and h/2
    disagree by more than ``tol``, or whose one-sided slopes differ by an amount
    that does not shrink with h, sits within h of a kink (ReLU, max, clamp
    edge); it is redrawn and counted in ``skipped``.
    """
    t0 = time.perf_counter()
    # a stream of its own: reusing the input generator's seed would make the
    # projection a copy of the input draw, which flattens e.g. batch norm
    rng = np.random.default_rng([seed, 0x67C])
    outs = _outputs(fn())
    proj = [rng.standard_normal(o.shape) / np.sqrt(max(o.size, 1)) for o in outs]

    def objective() -> float:
        with T.no_grad():
            # compensated summation keeps FD round-off near one ulp of the objective
            return math.fsum(v for o, p in zip(_outputs(fn()), proj) for v in (o.data * p).ravel())

    for leaf in leaves:
        leaf.grad = None
    outs = _outputs(fn())
    total = None
    for o, p in zip(outs, proj):
        term = T.sum_(T.mul(o, Tensor(p)))
        total = term if total is None else T.add(total, term)
    total.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    sizes = np.array([leaf.size for leaf in leaves])
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(leaves))]

    def draw():
        flat = int(rng.integers(sizes.sum()))
        i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        return i, flat - int(np.cumsum(sizes)[i - 1] if i else 0)

    picks += [draw() for _ in range(n_coords)]
    f0 = objective()
    worst, checked, skipped = 0.0, 0, 0
    queue = list(picks)
    budget = 4 * len(picks)
    while queue and budget:
        budget -= 1
        i, k = queue.pop(0)
        arr = leaves[i].data.reshape(-1)
        orig = arr[k]

        def at(delta):
            arr[k] = orig + delta
            try:
                return objective()
            finally:
                arr[k] = orig

        fp, fm, hp, hm = at(h), at(-h), at(h / 2), at(-h / 2)
        fd = (fp - fm) / (2 * h)
        fd_half = (hp - hm) / h
        # one-sided slope gap: O(h) on smooth ground, O(1) across a kink
        gap, gap_half = abs(fp - 2 * f0 + fm) / h, abs(hp - 2 * f0 + hm) / (h / 2)
        kink = gap > tol * abs(fd) + 1e-10 and gap_half > 0.75 * gap
        if kink or abs(fd - fd_half) > tol * (abs(fd_half) + 1e-8):
            skipped += 1
            queue.append(draw())
            continue
        analytic = float(grads[i].reshape(-1)[k])
        worst = max(worst, abs(analytic - fd) / (abs(fd) + 1e-8))
        checked += 1
    passed = checked >= len(picks) and worst <= tol and skipped <= len(picks) // 4
    return CheckResult(name, worst, checked, skipped, time.perf_counter() - t0, passed)


def check_module(module: Module, fn: Callable[[], object], inputs: Sequence[Tensor], **kw) -> CheckResult:
    module.train()
    leaves = list(inputs) + module.parameters()
    return gradcheck(fn, leaves, **kw)


# -- suite -------------------------------------------------------------

def _rand(rng, *shape, grad=True, positive=False) -> Tensor:
    data = rng.uniform(0.5, 1.5, size=shape) if positive else rng.standard_normal(shape)
    return Tensor(data, requires_grad=grad)


def _perturb(module: Module, rng, scale: float = 0.3) -> Module:
    """Replace zero-initialized weights so every branch is exercised."""
    for p in module.parameters():
        if p.ndim > 0 and not np.any(p.data):
            p.data = rng.standard_normal(p.shape) * scale
    return module


def _op_cases():
    def unary(op, positive=False, shape=(2, 3, 4, 5)):
        def make(rng):
            x = _rand(rng, *shape, positive=positive)
            return (lambda: op(x)), [x]
        return make

    def binary(op, sb=(2, 3, 4, 5), positive=False):
        def make(rng):
            a = _rand(rng, 2, 3, 4, 5)
            b = _rand(rng, *sb, positive=positive)
            return (lambda: op(a, b)), [a, b]
        return make

    def conv(stride=1, groups=1, k=3, mode="zero", cin=4, cout=6):
        def make(rng):
            x = _rand(rng, 2, cin, 7, 6)
            w = _rand(rng, cout, cin // groups, k, k)
            b = _rand(rng, cout)
            return (lambda: F.conv2d(x, w, b, stride=stride, padding=k // 2, padding_mode=mode, groups=groups)), [x, w, b]
        return make

    def bn(training_mode):
        def make(rng):
            x = _rand(rng, 3, 4, 5, 5)
            g, b = _rand(rng, 4), _rand(rng, 4)
            rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
            return (lambda: F.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training_mode)), [x, g, b]
        return make

    def ln(rng):
        x = _rand(rng, 2, 5, 4, 4)
        g, b = _rand(rng, 5), _rand(rng, 5)
        return (lambda: F.layer_norm2d(x, g, b)), [x, g, b]

    def matmul(rng):
        a, b = _rand(rng, 2, 4, 5), _rand(rng, 2, 5, 3)
        return (lambda: T.matmul(a, b)), [a, b]

    def concat(rng):
        a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 2, 4, 4)
        return (lambda: T.concat([a, b], axis=1)), [a, b]

    def pad(mode):
        return unary(lambda x: T.pad(x, ((2, 1), (1, 3)), mode))

    def mse(rng):
        a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
        return (lambda: T.mse_reduce(a, b)), [a, b]

    def ifft_complex(rng):
        re, im = _rand(rng, 2, 2, 4, 6), _rand(rng, 2, 2, 4, 6)
        return (lambda: spectral.ifft2d(spectral.ComplexPlane(re, im))), [re, im]

    def channel_roll(rng):
        x = _rand(rng, 2, 9, 5, 6)
        return (lambda: sw.omni_shift(x, 2, 1)), [x]

    return [
        ("add", binary(T.add)),
        ("add_broadcast", binary(T.add, sb=(1, 3, 1, 1))),
        ("sub", binary(T.sub)),
        ("mul", binary(T.mul)),
        ("mul_broadcast", binary(T.mul, sb=(2, 1, 4, 5))),
        ("div", binary(T.div, positive=True)),
        ("power", unary(lambda x: T.power(x, 3.0))),
        ("exp", unary(T.exp)),
        ("log", unary(T.log, positive=True)),
        ("sigmoid", unary(T.sigmoid)),
        ("relu", unary(T.relu)),
        ("gelu", unary(T.gelu)),
        ("clamp", unary(lambda x: T.clamp(x, -0.5, 0.5))),
        ("sum", unary(lambda x: T.sum_(x, axis=(1, 3)))),
        ("mean", unary(lambda x: T.mean(x, axis=2, keepdims=True))),
        ("max", unary(lambda x: T.max_(x, axis=1))),
        ("mse_reduce", mse),
        ("matmul_batched", matmul),
        ("reshape_permute", unary(lambda x: T.permute(T.reshape(x, (2, 12, 5)), (2, 0, 1)))),
        ("crop", unary(lambda x: T.crop(x, (slice(None), slice(1, 3), slice(0, 3), slice(2, 5))))),
        ("concat", concat),
        ("roll", unary(lambda x: T.roll(x, (1, -2)))),
        ("channel_roll", channel_roll),
        ("pad_zero", pad("zero")),
        ("pad_reflect", pad("reflect")),
        ("pad_cyclic", pad("cyclic")),
        ("upsample_nearest", unary(lambda x: T.upsample_nearest(x, 2))),
        ("softmax", unary(lambda x: T.softmax(x, axis=-1))),
        ("conv2d", conv()),
        ("conv2d_stride2", conv(stride=2)),
        ("conv2d_grouped", conv(groups=2)),
        ("conv2d_depthwise", conv(groups=4, cout=4, k=5)),
        ("conv2d_1x1", conv(k=1)),
        ("conv2d_reflect", conv(mode="reflect")),
        ("conv2d_cyclic", conv(mode="cyclic")),
        ("batch_norm2d_train", bn(True)),
        ("batch_norm2d_eval", bn(False)),
        ("layer_norm2d", ln),
        ("avg_pool2d", unary(lambda x: F.avg_pool2d(x, 3), shape=(2, 3, 6, 7))),
        ("global_avg_pool", unary(F.global_avg_pool)),
        ("global_max_pool", unary(F.global_max_pool)),
        ("fft2d_real", unary(spectral.fft2d_real, shape=(2, 2, 4, 6))),
        ("fft2d", unary(spectral.fft2d, shape=(2, 2, 5, 4))),
        ("ifft2d_real_spectrum", unary(spectral.ifft2d, shape=(2, 2, 4, 6))),
        ("ifft2d_complex", ifft_complex),
        ("omni_shift", unary(lambda x: sw.omni_shift(x, 1, 2), shape=(1, 10, 5, 5))),
        ("window_divide", unary(lambda x: sw.window_divide(x, 2), shape=(2, 3, 7, 5))),
        ("shift_window_roundtrip", unary(lambda x: sw.shift_window_inverse(sw.shift_window(x, sw.ShiftWindowConfig(2))),
                                         shape=(1, 9, 8, 6))),
    ]


def _module_cases():
    def mod(build, shapes, call=None, perturb=True):
        def make(rng):
            m = build(rng)
            if perturb:
                _perturb(m, rng)
            xs = [_rand(rng, *s) for s in shapes]
            fn = (lambda: m(*xs)) if call is None else (lambda: call(m, *xs))
            return fn, xs, m
        return make

    c, hw = 8, 8
    x4 = (2, c, hw, hw)
    return [
        ("frequency_process", mod(lambda r: spectral.FrequencyProcessor(c, rng=r), [x4])),
        ("cab", mod(lambda r: attention.ChannelAttention(c, 4, rng=r), [x4])),
        ("sab", mod(lambda r: attention.SpatialAttention(rng=r), [x4])),
        ("caa", mod(lambda r: attention.ContextAnchorAttention(c, 5, rng=r), [x4, x4])),
        ("gla", mod(lambda r: attention.GlobalLocalAttention(c, 4, rng=r), [x4, x4])),
        ("ahdda", mod(lambda r: attention.HybridDualAttention(c, 4, rng=r), [x4, x4])),
        ("channel_cross_attention", mod(lambda r: attention.ChannelCrossAttention(32, rng=r), [(2, 32, 4, 4)] * 2)),
        ("oaiblock", mod(lambda r: blocks.OAIBlock(4, 2, reduction=4, strip=5, rng=r), [(2, 4, 12, 12)])),
        ("hddaconv", mod(lambda r: blocks.HDDAConv(4, 2, reduction=4, strip=5, rng=r), [(2, 4, 12, 12)])),
        ("hdctransformer", mod(lambda r: blocks.HDCTransformer(16, 2, rng=r), [(2, 16, 6, 6)])),
        ("plain_block", mod(lambda r: blocks.PlainBlock(c, rng=r), [x4])),
        ("double_out", mod(lambda r: blocks.DoubleOut(c, 3, rng=r), [x4, (2, 3, hw, hw)])),
        ("downsample", mod(lambda r: blocks.Downsample(c, rng=r), [x4])),
        ("upsample", mod(lambda r: blocks.Upsample(c, rng=r), [x4])),
    ]


def _loss_cases():
    def pair_loss(fn, hw=12):
        def make(rng):
            a = Tensor(rng.uniform(0.1, 0.9, (2, 3, hw, hw)), requires_grad=True)
            b = Tensor(rng.uniform(0.1, 0.9, (2, 3, hw, hw)), requires_grad=True)
            return (lambda: fn(a, b)), [a, b]
        return make

    def total(rng):
        ext = training.FeatureExtractor(((4, 4), (6, 6), (8, 8, 8)))
        o1, o2, gt, inp = (Tensor(rng.uniform(0.1, 0.9, (2, 3, 12, 12)), requires_grad=True) for _ in range(4))
        return (lambda: training.loss_total(o1, o2, gt, inp, training.LossWeights(), ext)[0]), [o1, o2]

    def perceptual(rng):
        ext = training.FeatureExtractor(((4, 4), (6, 6), (8, 8, 8)))
        a = Tensor(rng.uniform(0.1, 0.9, (2, 3, 12, 12)), requires_grad=True)
        b = Tensor(rng.uniform(0.1, 0.9, (2, 3, 12, 12)))
        return (lambda: training.loss_perceptual(a, b, ext)), [a]

    return [
        ("loss_mse", pair_loss(training.loss_mse)),
        ("loss_ssim", pair_loss(training.loss_ssim)),
        ("loss_perceptual", perceptual),
        ("loss_total", total),
    ]


SUITE = [("op", n, m) for n, m in _op_cases()] + [("block", n, m) for n, m in _module_cases()] \
    + [("loss", n, m) for n, m in _loss_cases()]


def run_suite(names: Sequence[str] | None = None, n_coords: int = 32, seed: int = 0,
              tol: float = 1e-4) -> list[CheckResult]:
    """Run every registered check in float64.

    ``names`` restricts the selection; an entry matches a check's exact name, its
    kind ("op", "block", "loss"), or, with a trailing ``*``, a name prefix.
    """
    results = []
    for kind, name, make in SUITE:
        if names and not any(sel in (name, kind) or (sel.endswith("*") and name.startswith(sel[:-1]))
                             for sel in names):
            continue
        rng = np.random.default_rng(seed)
        with default_dtype(np.float64):
            built = make(rng)
        if len(built) == 3:
            fn, xs, m = built
            m.train()
            leaves = list(xs) + m.parameters()
        else:
            fn, leaves = built
        results.append(gradcheck(fn, leaves, n_coords=n_coords, seed=seed, tol=tol, name=name))
    return results
