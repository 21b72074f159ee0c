import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmshr.blocks import DoubleOut, Downsample, HDCTransformer, HDDAConv, OAIBlock, PlainBlock, SingleOut, Upsample
from mmshr.gradcheck import check_module
from mmshr.shift_window import ShiftWindowConfig, WindowedFeature, shift_window, shift_window_inverse, window_divide, window_merge
from mmshr.tensor import Tensor, add, mse_reduce, roll
from mmshr.training import loss_mse


def randomize(m, rng, scale=0.3):
    for p in m.parameters():
        if p.size > 1:
            p.data[...] = rng.standard_normal(p.shape) * scale
    return m


def ones_gate(f):
    return Tensor(np.ones(f.shape))


# -- OAIBlock ------------------------------------------------------------

def test_oai_alpha_one_selects_gla(f64, rng):
    m = OAIBlock(4, 2, rng=rng)
    m.alpha.data[...] = 1.0
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    f = shift_window(x, m.window)
    y = m.blend(x).data.data
    assert np.array_equal(y, m.gla(m.fp(f.data), f.data).data)


def test_oai_unit_gates_double_the_input(f64, rng):
    m = OAIBlock(4, 2, rng=rng)
    m.alpha.data[...] = 0.37
    m.gla.cab.forward = lambda f: Tensor(np.ones((f.shape[0], f.shape[1], 1, 1)))
    m.gla.sab.forward = lambda f: Tensor(np.ones((f.shape[0], 1) + f.shape[2:]))
    m.caa.gate = ones_gate
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    assert np.allclose(m(x).data, 2 * x.data, atol=1e-15)


def test_oai_matches_composition(f64, rng):
    m = OAIBlock(8, 2, strip=5, rng=rng)
    m.alpha.data[...] = 0.3
    x = Tensor(rng.standard_normal((2, 8, 16, 16)))
    cfg = ShiftWindowConfig(2)
    f = shift_window(x, cfg)
    fp = m.fp(f.data)
    y = 0.3 * m.gla(fp, f.data).data + 0.7 * m.caa(fp, f.data).data
    ref = x.data + shift_window_inverse(WindowedFeature(Tensor(y), f.origin, cfg, f.shift)).data
    assert np.max(np.abs(m(x).data - ref)) <= 1e-5


# -- HDDAConv --------------------------------------------------------------

def test_hdda_zero_input_gives_fuse_bias(f64, rng):
    m = HDDAConv(4, 2, strip=5, zero_init=False, rng=rng)
    m.fuse.bias.data[:] = [0.1, 0.2, -0.3, 0.4]
    out = m(Tensor(np.zeros((1, 4, 8, 8)))).data
    assert np.allclose(out, np.array([0.1, 0.2, -0.3, 0.4])[None, :, None, None], atol=1e-15)


def test_hdda_beta_one_half_gates_composition(f64, rng):
    m = HDDAConv(4, 2, strip=5, zero_init=False, rng=rng)
    m.ahdda.beta.data[...] = 1.0
    m.caa_pos.conv_out.weight.data[:] = 0
    m.caa_neg.conv_out.weight.data[:] = 0
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    cfg = ShiftWindowConfig(2, 0, 0)
    f = window_divide(x, cfg)
    fp = m.fp(f.data)
    main = window_merge(WindowedFeature(Tensor(m.ahdda.cab(fp).data * f.data.data), f.origin, cfg)).data
    # each offset path gates with 0.5 and is rolled back, so it contributes 0.5 * x
    ref = x.data + m.fuse(Tensor(main + x.data)).data
    assert np.max(np.abs(m(x).data - ref)) <= 1e-10


def test_hdda_offset_paths_roll_and_unroll(f64, rng):
    m = randomize(HDDAConv(4, 2, strip=5, rng=rng), rng)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    cfg = ShiftWindowConfig(2, 0, 0)
    f = window_divide(x, cfg)
    fp = m.fp(f.data)
    fp_map = window_merge(WindowedFeature(fp, f.origin, cfg))
    total = window_merge(WindowedFeature(m.ahdda(fp, f.data), f.origin, cfg)).data
    s = m.offset(8, 8)
    assert s == 2
    for sign, caa in ((1, m.caa_pos), (-1, m.caa_neg)):
        xs = window_divide(roll(x, (sign * s, sign * s)), cfg)
        ps = window_divide(roll(fp_map, (sign * s, sign * s)), cfg)
        merged = window_merge(WindowedFeature(caa(ps.data, xs.data), f.origin, cfg))
        total = total + np.roll(merged.data, (-sign * s, -sign * s), axis=(2, 3))
    assert np.max(np.abs(m.paths(x).data - total)) <= 1e-12


# -- HDCTransformer ----------------------------------------------------------

def test_hdct_zero_branches_are_identity(rng):
    m = HDCTransformer(16, rng=rng)
    x = Tensor(rng.standard_normal((2, 16, 4, 4)).astype(np.float32))
    assert np.array_equal(m(x).data, x.data)


def test_hdct_uniform_attention_branch(f64, rng):
    m = randomize(HDCTransformer(32, rng=rng), rng)
    m.ffn_out.weight.data[:] = 0
    m.ffn_out.bias.data[:] = 0
    for conv in (m.attn.q, m.attn.k):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    x = Tensor(rng.standard_normal((1, 32, 4, 4)))
    n = m.norm1(x).data[0]
    v = np.einsum("oc,chw->ohw", m.attn.v.weight.data[:, :, 0, 0], n) + m.attn.v.bias.data[:, None, None]
    means = np.repeat(v.reshape(2, 16, 4, 4).mean(1), 16, axis=0)
    branch = np.einsum("oc,chw->ohw", m.attn.proj.weight.data[:, :, 0, 0], means) + m.attn.proj.bias.data[:, None, None]
    assert np.max(np.abs(m(x).data[0] - (x.data[0] + branch))) <= 1e-10


def test_hdct_fd_through_query_path(f64, rng):
    m = randomize(HDCTransformer(16, rng=rng), rng)
    x = Tensor(rng.standard_normal((1, 16, 4, 4)), requires_grad=True)
    res = check_module(m, lambda: m(x), [x])
    assert res.passed, res.row()
    assert m.fp.outer.weight.grad is not None and np.any(m.fp.outer.weight.grad)


# -- safe start and shape contracts --------------------------------------------

@pytest.mark.parametrize("make", [
    lambda r: PlainBlock(8, rng=r),
    lambda r: HDDAConv(8, 2, strip=5, rng=r),
    lambda r: HDCTransformer(16, rng=r),
])
def test_zero_init_blocks_are_identity(make, rng):
    m = make(rng)
    c = 16 if isinstance(m, HDCTransformer) else 8
    x = Tensor(rng.standard_normal((2, c, 8, 8)).astype(np.float32))
    assert np.array_equal(m(x).data, x.data)


def test_oaiblock_is_not_identity_at_init(rng):
    # the blend of gated features has no trailing projection to zero
    m = OAIBlock(4, 2, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    assert not np.array_equal(m(x).data, x.data)


@given(st.sampled_from(["oai", "hdda", "hdct", "plain"]), st.integers(1, 2), st.sampled_from([8, 12, 16]),
       st.sampled_from([8, 16]))
def test_blocks_preserve_shape(kind, n, h, w):
    r = np.random.default_rng(0)
    m, c = {
        "oai": (OAIBlock(4, 2, strip=5, rng=r), 4),
        "hdda": (HDDAConv(4, 2, strip=5, rng=r), 4),
        "hdct": (HDCTransformer(16, rng=r), 16),
        "plain": (PlainBlock(4, rng=r), 4),
    }[kind]
    x = Tensor(r.standard_normal((n, c, h, w)).astype(np.float32))
    assert m(x).shape == x.shape


def test_scale_changers_shapes():
    x = Tensor(np.zeros((1, 8, 16, 16), np.float32))
    d = Downsample(8)(x)
    assert d.shape == (1, 16, 8, 8)
    assert Upsample(16)(d).shape == (1, 8, 16, 16)


def test_upsample_identity_kernel_recovers_nearest(f64, rng):
    up = Upsample(4, rng=rng)
    up.conv.weight.data[:] = 0
    up.conv.weight.data[np.arange(2), np.arange(2), 1, 1] = 1
    x = rng.standard_normal((1, 4, 3, 3))
    out = up(Tensor(x)).data
    assert np.max(np.abs(out - x[:, :2].repeat(2, axis=2).repeat(2, axis=3))) <= 1e-6


# -- output heads --------------------------------------------------------------

def test_double_out_zero_heads(rng):
    head = DoubleOut(8, 3)
    feats = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    image = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    out1, out2 = head(feats, image)
    # clean head is a correction on top of the image; residual head starts at zero
    assert np.array_equal(out1.data, image.data) and not out2.data.any()
    assert loss_mse(add(out1, out2), image).item() == 0.0


def test_mse2_with_zero_residual_vanishes_iff_out1_is_input(rng):
    image = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
    zero = Tensor(np.zeros((1, 3, 4, 4)))
    assert mse_reduce(add(image, zero), image).item() == 0.0
    other = Tensor(image.data + 0.01)
    assert mse_reduce(add(other, zero), image).item() > 0.0


def test_single_out_residual_is_complement(rng):
    head = randomize(SingleOut(8, 3, rng=rng), rng)
    feats = Tensor(rng.standard_normal((1, 8, 6, 6)))
    image = Tensor(rng.uniform(0, 1, (1, 3, 6, 6)))
    out1, out2 = head(feats, image)
    assert np.allclose(out1.data + out2.data, image.data, atol=1e-12)


@pytest.mark.parametrize("kind", ["oai", "hdda", "plain", "double"])
def test_block_fd(f64, rng, kind):
    if kind == "oai":
        m, c = OAIBlock(4, 2, strip=5, rng=rng), 4
    elif kind == "hdda":
        m, c = HDDAConv(4, 2, strip=5, rng=rng), 4
    elif kind == "plain":
        m, c = PlainBlock(4, rng=rng), 4
    else:
        m, c = DoubleOut(4, 3, rng=rng), 4
    randomize(m, rng)
    for p in m.parameters():
        if p.size == 1:
            p.data[...] = 0.4
    x = Tensor(rng.standard_normal((1, c, 8, 8)), requires_grad=True)
    if kind == "double":
        img = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
        res = check_module(m, lambda: m(x, img), [x, img])
    else:
        res = check_module(m, lambda: m(x), [x])
    assert res.passed, res.row()
