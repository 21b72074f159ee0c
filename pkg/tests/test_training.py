import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmshr.data_io import write_records
from mmshr.errors import ConfigError, NumericalError, ShapeError
from mmshr.gradcheck import gradcheck
from mmshr.network import ModelConfig, build_model
from mmshr.tensor import Tensor, mul, sum_
from mmshr.training import (
    AdamW,
    EpochRecord,
    FeatureExtractor,
    LOG_FIELDS,
    LossWeights,
    ScheduleConfig,
    _gaussian_1d,
    cosine_lr,
    fit,
    load_extractor,
    loss_mse,
    loss_perceptual,
    loss_ssim,
    loss_total,
    metric_psnr,
    metric_ssim,
    optim_step,
    weighted_total,
)


def img(rng, shape=(1, 3, 16, 16)):
    return rng.uniform(0, 1, shape)


# -- schedule ------------------------------------------------------------

def test_schedule_endpoints_and_midpoint():
    cfg = ScheduleConfig()
    assert cosine_lr(0, cfg) == 1e-3
    assert cosine_lr(cfg.total_epochs, cfg) == 1e-5
    assert cosine_lr(cfg.total_epochs / 2, cfg) == pytest.approx(5.05e-4, rel=1e-12)


@given(st.integers(1, 500), st.floats(1e-6, 1e-2), st.floats(0, 1))
def test_schedule_monotone_and_bounded(total, lr_max, frac):
    cfg = ScheduleConfig(lr_max=lr_max, lr_min=lr_max * frac, total_epochs=total)
    lrs = [cosine_lr(e, cfg) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(cfg.lr_min <= v <= cfg.lr_max for v in lrs)


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        ScheduleConfig(lr_max=1e-5, lr_min=1e-3)
    with pytest.raises(ConfigError):
        cosine_lr(101, ScheduleConfig())


# -- pixel losses ----------------------------------------------------------

def test_mse_closed_forms(rng):
    x = img(rng)
    assert loss_mse(Tensor(x), Tensor(x)).item() == 0.0
    assert loss_mse(Tensor(x + 0.1), Tensor(x)).item() == pytest.approx(0.01, rel=1e-9)
    a, b = rng.uniform(0, 1, (3, 5)), rng.uniform(0, 1, (3, 5))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(5)) / 15
    assert abs(loss_mse(Tensor(a), Tensor(b)).item() - ref) <= 1e-7
    with pytest.raises(ShapeError):
        loss_mse(Tensor(a), Tensor(b.T))


def literal_ssim(a, b):
    """Per-window SSIM with explicit Gaussian weights; a, b: (H, W)."""
    g = np.outer(_gaussian_1d(), _gaussian_1d())
    k = g.shape[0]
    h, w = a.shape
    vals = []
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            pa, pb = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cv = (g * (pa - ma) * (pb - mb)).sum()
            c1, c2 = 0.01 ** 2, 0.03 ** 2
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_window_guard(rng):
    x = img(rng)
    assert abs(loss_ssim(Tensor(x), Tensor(x)).item()) <= 1e-12
    assert metric_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        loss_ssim(Tensor(np.zeros((1, 1, 10, 20))), Tensor(np.zeros((1, 1, 10, 20))))


def test_ssim_matches_literal_windows(rng):
    a, b = rng.uniform(0, 1, (1, 1, 16, 18)), rng.uniform(0, 1, (1, 1, 16, 18))
    assert abs(metric_ssim(a, b) - literal_ssim(a[0, 0], b[0, 0])) <= 1e-5
    assert abs((1 - loss_ssim(Tensor(a), Tensor(b)).item()) - literal_ssim(a[0, 0], b[0, 0])) <= 1e-5


def test_ssim_of_negative_is_low():
    yy, xx = np.mgrid[0:32, 0:32]
    x = (0.5 + 0.25 * np.sin(xx / 3.0) * np.cos(yy / 4.0))[None, None]
    assert metric_ssim(x, 1 - x) < 0.5


def test_psnr_closed_forms(rng):
    x = img(rng)
    assert metric_psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)
    assert metric_psnr(x, x) == 100.0
    a, b = rng.uniform(0, 1, (4, 4)), rng.uniform(0, 1, (4, 4))
    assert abs(metric_psnr(a, b) - 10 * math.log10(1 / np.mean((a - b) ** 2))) <= 1e-6


def test_psnr_decreases_with_noise(rng):
    x = img(rng)
    noise = rng.standard_normal(x.shape)
    vals = [metric_psnr(x + s * noise, x) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


# -- perceptual loss ----------------------------------------------------------

def test_perceptual_identity_and_symmetry(f64, rng):
    ext = FeatureExtractor(((4, 4), (6, 6), (8, 8, 8)))
    a, b = Tensor(img(rng)), Tensor(img(rng))
    assert loss_perceptual(a, a, ext).item() == 0.0
    assert loss_perceptual(a, b, ext).item() == pytest.approx(loss_perceptual(b, a, ext).item(), rel=1e-12)


def test_perceptual_homogeneity(f64, rng):
    a, b = Tensor(img(rng)), Tensor(img(rng))
    ext = FeatureExtractor(((5, 5),))
    base = loss_perceptual(a, b, ext).item()
    c = 1.7
    for _, w in ext.named_weights():
        w.data = w.data * c
    assert loss_perceptual(a, b, ext).item() == pytest.approx(c ** 4 * base, rel=1e-10)


def test_perceptual_is_mean_over_taps(f64, rng):
    ext = FeatureExtractor(((4, 4), (6, 6), (8, 8, 8)))
    a, b = Tensor(img(rng)), Tensor(img(rng))
    fa, fb = ext(a), ext(b)
    ref = np.mean([np.mean((x.data - y.data) ** 2) for x, y in zip(fa, fb)])
    assert loss_perceptual(a, b, ext).item() == pytest.approx(ref, rel=1e-12)
    assert [t.shape[1] for t in fa] == [4, 6, 8]


def test_extractor_is_frozen():
    ext = FeatureExtractor()
    assert ext.parameters() == []
    assert len(list(ext.named_weights())) == 7


def test_load_extractor_roundtrip(tmp_path, rng):
    template = FeatureExtractor(((4, 4), (6,)), downsample="maxpool", bias=True, seed=0)
    recs = OrderedDict((n, rng.standard_normal(t.shape).astype(np.float32)) for n, t in template.named_weights())
    write_records(tmp_path / "w.ckpt", "{}", recs)
    ext = load_extractor(tmp_path / "w.ckpt", template)
    for n, t in ext.named_weights():
        assert np.array_equal(t.data, recs[n])
    recs.popitem()
    write_records(tmp_path / "short.ckpt", "{}", recs)
    with pytest.raises(ConfigError, match="missing"):
        load_extractor(tmp_path / "short.ckpt", FeatureExtractor(((4, 4), (6,)), downsample="maxpool", bias=True))


def test_vgg16_layout_shapes():
    ext = FeatureExtractor.vgg16_layout()
    shapes = dict((n, t.shape) for n, t in ext.named_weights())
    assert shapes["conv1_1.weight"] == (64, 3, 3, 3) and shapes["conv3_3.weight"] == (256, 256, 3, 3)
    assert len(shapes) == 14


# -- total loss -----------------------------------------------------------------

def test_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.mse1, w.mse2, w.ssim, w.vgg) == (1, 1.5, 0.4, 0.2)
    with pytest.raises(ConfigError):
        LossWeights(ssim=-0.1)


def test_weighted_arithmetic():
    assert weighted_total((0, 0, 0, 0)) == 0.0
    got = weighted_total({"mse1": 0.1, "mse2": 0.2, "ssim": 0.3, "vgg": 0.4})
    assert got == 1 * 0.1 + 1.5 * 0.2 + 0.4 * 0.3 + 0.2 * 0.4
    assert abs(got - 0.6) <= math.ulp(0.6)
    # exact rational arithmetic on the binary64 operands rounds to the same value, not to 0.6
    from fractions import Fraction

    exact = sum(Fraction(c) * Fraction(w) for c, w in zip((0.1, 0.2, 0.3, 0.4), (1.0, 1.5, 0.4, 0.2)))
    assert got == float(exact) == 0.6000000000000001


def test_total_zero_at_perfect_decomposition(f64, rng):
    gt = img(rng)
    res = rng.uniform(0, 0.3, gt.shape)
    total, parts = loss_total(Tensor(gt), Tensor(res), Tensor(gt), Tensor(gt + res),
                              extractor=FeatureExtractor(((4, 4),)))
    assert abs(total.item()) <= 1e-12 and all(abs(v) <= 1e-12 for v in parts.values())


@given(st.integers(0, 10_000))
def test_total_nonnegative(seed):
    r = np.random.default_rng(seed)
    shape = (1, 3, 12, 12)
    out1, out2, gt, inp = (Tensor(r.uniform(-0.2, 1.2, shape)) for _ in range(4))
    total, parts = loss_total(out1, out2, gt, inp, extractor=FeatureExtractor(((4, 4),)))
    assert total.item() >= 0
    assert total.item() == pytest.approx(weighted_total(parts), rel=1e-6)


def test_total_fd_wrt_outputs(f64, rng):
    ext = FeatureExtractor(((4, 4), (6, 6)))
    out1 = Tensor(img(rng, (1, 3, 12, 12)), requires_grad=True)
    out2 = Tensor(rng.uniform(0, 0.2, (1, 3, 12, 12)), requires_grad=True)
    gt, inp = Tensor(img(rng, (1, 3, 12, 12))), Tensor(img(rng, (1, 3, 12, 12)))
    res = gradcheck(lambda: loss_total(out1, out2, gt, inp, extractor=ext)[0], [out1, out2])
    assert res.passed, res.row()


# -- optimizer ----------------------------------------------------------------------

def _param(value, name="w"):
    return name, Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def test_first_step_moves_by_lr():
    name, p = _param([0.7, -2.0, 5.0])
    opt = AdamW([(name, p)], eps=0.0, weight_decay=0.0)
    p.grad = np.array([3.0, -0.01, 1e4])
    opt.step(1e-3)
    assert np.allclose(p.data, [0.7 - 1e-3, -2.0 + 1e-3, 5.0 - 1e-3], atol=1e-15)


def test_decoupled_decay_only():
    name, p = _param([1.0, -4.0])
    opt = AdamW([(name, p)], weight_decay=1e-2)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step(0.1)
    assert np.allclose(p.data, np.array([1.0, -4.0]) * (1 - 0.1 * 1e-2) ** 3, rtol=1e-14)


def test_blend_scalars_are_not_decayed():
    params = [_param(0.5, "blk.alpha"), _param(0.5, "blk.beta"), _param(1.0, "attn.log_delta"), _param(0.5, "conv.weight")]
    opt = AdamW(params, weight_decay=0.5)
    for _, p in params:
        p.grad = np.zeros(())
    opt.step(0.1)
    assert [float(p.data) for _, p in params] == [0.5, 0.5, 1.0, 0.5 * (1 - 0.05)]


def test_zero_lr_zero_decay_is_noop(rng):
    name, p = _param(rng.standard_normal(5))
    before = p.data.copy()
    opt = AdamW([(name, p)], weight_decay=0.0)
    p.grad = rng.standard_normal(5)
    opt.step(0.0)
    assert np.array_equal(p.data, before)


def test_missing_grad_names_parameter():
    opt = AdamW([_param(1.0, "enc.0.weight")])
    with pytest.raises(ValueError, match="enc.0.weight"):
        opt.step(1e-3)


def test_quadratic_bowl_monotone():
    name, p = _param([3.0, -2.0, 1.5])
    scale = np.array([1.0, 4.0, 0.5])
    opt = AdamW([(name, p)])
    losses = []
    for _ in range(10):
        opt.zero_grad()
        loss = sum_(mul(Tensor(scale), mul(p, p)))
        losses.append(loss.item())
        loss.backward()
        opt.step(0.1)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_optimizer_state_shapes_mirror_params():
    store, _ = build_model(ModelConfig.desk(), seed=0)
    opt = AdamW(store)
    assert all(opt.state.m[k].shape == p.shape == opt.state.v[k].shape for k, p in store)
    for _, p in store:
        p.grad = np.zeros_like(p.data)
    assert optim_step(store, opt, 1e-3) is store and opt.state.step == 1


# -- loop -----------------------------------------------------------------------

def test_log_row_format():
    rec = EpochRecord(3, 1e-3, 0.5, 0.1, 0.2, 0.3, 0.4, 30.0, 0.9)
    assert EpochRecord.header().split("\t") == list(LOG_FIELDS)
    assert rec.row().split("\t")[0] == "3" and len(rec.row().split("\t")) == 9


def _toy_data(rng, n=4, side=16):
    gt = rng.uniform(0, 0.4, (n, 3, side, side)).astype(np.float32)
    res = np.zeros_like(gt)
    res[:, :, 4:10, 4:10] = 0.5
    return gt + res, gt


def test_fit_reduces_training_loss(rng):
    cfg = ModelConfig(base_channels=4, level_blocks=(1, 1, 1, 1), expansion=(2, 2), strip_kernel=5)
    _, model = build_model(cfg, seed=0)
    x, y = _toy_data(rng)
    hist, report, opt = fit(model, x, y, x, y, ScheduleConfig(total_epochs=4, batch=2),
                            extractor=FeatureExtractor(((4, 4),)), seed=0)
    assert len(hist) == 4 and opt.state.step == 8
    assert hist[-1].loss_total < hist[0].loss_total
    assert report.input_psnr == pytest.approx(np.mean([metric_psnr(a, b) for a, b in zip(x, y)]))


def test_fit_detects_non_finite_loss(rng):
    cfg = ModelConfig(base_channels=4, level_blocks=(1, 1, 1, 1), expansion=(2, 2), strip_kernel=5)
    _, model = build_model(cfg, seed=0)
    x, y = _toy_data(rng)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        fit(model, x, y, x, y, ScheduleConfig(total_epochs=1, batch=4), extractor=FeatureExtractor(((4, 4),)))
