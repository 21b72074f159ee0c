import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import uniform_filter
from scipy.signal import correlate2d

from mmshr.attention import (
    ChannelAttention,
    ChannelCrossAttention,
    ContextAnchorAttention,
    GlobalLocalAttention,
    HybridDualAttention,
    SpatialAttention,
)
from mmshr.errors import ConfigError, ShapeError
from mmshr.gradcheck import check_module
from mmshr.tensor import Tensor


def sig(x):
    return 1 / (1 + np.exp(-x))


def np_conv_same(x, w, b=None):
    """Zero-padded 'same' correlation via scipy, one output channel at a time. x: (C,H,W), w: (O,C,kh,kw)."""
    out = np.stack([sum(correlate2d(x[c], w[o, c], mode="same") for c in range(x.shape[0]))
                    for o in range(w.shape[0])])
    return out if b is None else out + b[:, None, None]


def np_cab(m, f):
    w1, w2 = m.fc1.weight.data[:, :, 0, 0], m.fc2.weight.data[:, :, 0, 0]
    mlp = lambda v: w2 @ np.maximum(w1 @ v, 0)
    return np.stack([sig(mlp(x.mean(axis=(1, 2))) + mlp(x.max(axis=(1, 2)))) for x in f])[:, :, None, None]


def np_sab(m, f):
    w = m.conv.weight.data
    return np.stack([sig(np_conv_same(np.stack([x.mean(0), x.max(0)]), w)) for x in f])


def np_caa_gate(m, fp):
    out = []
    for x in fp:
        c = x.shape[0]
        pooled = np.stack([uniform_filter(ch, size=m.pool, mode="constant") for ch in x])
        t = np_conv_same(pooled, m.conv_in.weight.data, m.conv_in.bias.data)
        t = np.stack([correlate2d(t[i], m.strip_h.weight.data[i, 0], mode="same") for i in range(c)]) \
            + m.strip_h.bias.data[:, None, None]
        t = np.stack([correlate2d(t[i], m.strip_v.weight.data[i, 0], mode="same") for i in range(c)]) \
            + m.strip_v.bias.data[:, None, None]
        out.append(sig(np_conv_same(t, m.conv_out.weight.data, m.conv_out.bias.data)))
    return np.stack(out)


def randomize(m, rng, scale=0.5):
    for p in m.parameters():
        if p.size > 1:
            p.data[...] = rng.standard_normal(p.shape) * scale
    return m


@pytest.fixture
def pair(rng):
    return (Tensor(rng.standard_normal((2, 8, 9, 10))), Tensor(rng.standard_normal((2, 8, 9, 10))))


# -- CAB / SAB ---------------------------------------------------------

def test_cab_zero_weights_give_half(f64, pair):
    m = ChannelAttention(8)
    m.fc1.weight.data[:] = 0
    g = m(pair[0]).data
    assert g.shape == (2, 8, 1, 1) and np.all(g == 0.5)


def test_cab_constant_input_bounds(f64, rng):
    g = ChannelAttention(8, rng=rng)(Tensor(np.full((1, 8, 5, 5), 0.7))).data
    assert np.all((g > 0) & (g < 1))


def test_cab_matches_numpy_oracle(f64, pair, rng):
    m = ChannelAttention(8, rng=rng)
    assert np.max(np.abs(m(pair[0]).data - np_cab(m, pair[0].data))) <= 1e-6


def test_cab_rejects_small_channel_count():
    with pytest.raises(ConfigError):
        ChannelAttention(3, reduction=4)


def test_sab_zero_weights_give_half(f64, pair):
    m = SpatialAttention()
    m.conv.weight.data[:] = 0
    assert np.all(m(pair[0]).data == 0.5)


def test_sab_matches_scipy_oracle(f64, pair, rng):
    m = SpatialAttention(rng=rng)
    out = m(pair[0]).data
    assert out.shape == (2, 1, 9, 10)
    assert np.all((out > 0) & (out < 1))
    assert np.max(np.abs(out - np_sab(m, pair[0].data))) <= 1e-6


# -- CAA -----------------------------------------------------------------

def test_caa_zero_weights_halve_f(f64, pair):
    m = ContextAnchorAttention(8)
    m.conv_out.weight.data[:] = 0
    assert np.allclose(m(*pair).data, 0.5 * pair[1].data, atol=0)


def test_caa_zero_f_gives_zero(f64, pair, rng):
    m = randomize(ContextAnchorAttention(8, rng=rng), rng)
    assert not m(pair[0], Tensor(np.zeros((2, 8, 9, 10)))).data.any()


def test_caa_matches_scipy_oracle(f64, pair, rng):
    m = randomize(ContextAnchorAttention(8, strip=5, rng=rng), rng)
    for conv in (m.conv_in, m.strip_h, m.strip_v, m.conv_out):
        conv.bias.data[:] = rng.standard_normal(conv.bias.shape) * 0.1
    gate = np_caa_gate(m, pair[0].data)
    assert np.max(np.abs(m(*pair).data - gate * pair[1].data)) <= 1e-6


def test_caa_rejects_mismatched_pair(f64, rng):
    m = ContextAnchorAttention(8)
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 4, 5))))


# -- GLA / AHDDA ---------------------------------------------------------

def test_gla_with_unit_gates_returns_f(f64, pair, rng):
    m = GlobalLocalAttention(8, rng=rng)
    m.cab.forward = lambda f: Tensor(np.ones((f.shape[0], f.shape[1], 1, 1)))
    m.sab.forward = lambda f: Tensor(np.ones((f.shape[0], 1) + f.shape[2:]))
    assert np.array_equal(m(*pair).data, pair[1].data)


def test_gla_matches_equation_composition(f64, pair, rng):
    m = GlobalLocalAttention(8, rng=rng)
    fp, f = pair[0].data, pair[1].data
    local = np_cab(m.cab, fp) * f
    ref = np_sab(m.sab, local) * f
    assert np.max(np.abs(m(*pair).data - ref)) <= 1e-6
    assert not m(pair[0], Tensor(np.zeros_like(f))).data.any()


@pytest.mark.parametrize("beta,which", [(1.0, "cab"), (0.0, "sab"), (3.0, "cab"), (-2.0, "sab")])
def test_ahdda_endpoints_exact(f64, pair, rng, beta, which):
    m = HybridDualAttention(8, rng=rng)
    m.beta.data[...] = beta
    fp, f = pair
    expected = (m.cab(fp) if which == "cab" else m.sab(fp)).data * f.data
    assert np.array_equal(m(fp, f).data, expected)


def test_ahdda_midpoint_is_average(f64, pair, rng):
    m = HybridDualAttention(8, rng=rng)
    fp, f = pair
    a = m.cab(fp).data * f.data
    b = m.sab(fp).data * f.data
    assert np.max(np.abs(m(fp, f).data - 0.5 * (a + b))) <= 1e-6


@given(st.floats(0, 1), st.integers(0, 500))
def test_gating_and_blend_properties(beta, seed):
    r = np.random.default_rng(seed)
    fp = Tensor(r.standard_normal((1, 8, 6, 6)))
    f = Tensor(r.standard_normal((1, 8, 6, 6)))
    m = HybridDualAttention(8, rng=r)
    m.beta.data = np.asarray(beta, dtype=np.float32)
    out = m(fp, f).data
    a = (m.cab(fp).data * f.data)
    b = (m.sab(fp).data * f.data)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    tol = 1e-6 * (1 + np.abs(f.data))
    assert np.all(out >= lo - tol) and np.all(out <= hi + tol)
    assert np.all(np.abs(out) <= np.abs(f.data) + tol)


# -- channel cross-attention ----------------------------------------------

def loop_attention(m, q_src, kv_src):
    n, c, h, w = q_src.shape
    heads = m.heads
    ch = c // heads
    conv = lambda mod, x: np.einsum("oc,chw->ohw", mod.weight.data[:, :, 0, 0], x) + mod.bias.data[:, None, None]
    out = np.zeros_like(q_src)
    delta = math.exp(float(m.log_delta.data))
    for i in range(n):
        q, k, v = conv(m.q, q_src[i]), conv(m.k, kv_src[i]), conv(m.v, kv_src[i])
        res = np.zeros((c, h * w))
        for hd in range(heads):
            sl = slice(hd * ch, (hd + 1) * ch)
            qh, kh, vh = (t[sl].reshape(ch, -1) for t in (q, k, v))
            for a in range(ch):
                logits = np.array([np.dot(qh[a], kh[b]) / delta for b in range(ch)])
                p = np.exp(logits - logits.max())
                p /= p.sum()
                res[hd * ch + a] = sum(p[b] * vh[b] for b in range(ch))
        out[i] = conv(m.proj, res.reshape(c, h, w))
    return out


def test_cca_head_rule_and_temperature_init():
    m = ChannelCrossAttention(64)
    assert m.heads == 4 and m.delta == pytest.approx(4.0)
    with pytest.raises(ConfigError):
        ChannelCrossAttention(32, heads=3)


def test_cca_matches_loop_oracle(f64, rng):
    m = ChannelCrossAttention(32, heads=2, rng=rng)
    for conv in (m.q, m.k, m.v, m.proj):
        conv.bias.data[:] = rng.standard_normal(32) * 0.1
    q_src, kv_src = rng.standard_normal((2, 2, 32, 8, 8)) * 0.3
    out = m(Tensor(q_src), Tensor(kv_src)).data
    assert np.max(np.abs(out - loop_attention(m, q_src, kv_src))) <= 1e-5


def test_cca_uniform_attention(f64, rng):
    m = ChannelCrossAttention(32, heads=2, rng=rng)
    for conv in (m.q, m.k):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    q_src, kv_src = (Tensor(rng.standard_normal((1, 32, 4, 4))) for _ in range(2))
    attn = m.attention_map(q_src, kv_src).data
    assert np.all(attn == 1 / 16)
    v = np.einsum("oc,chw->ohw", m.v.weight.data[:, :, 0, 0], kv_src.data[0]) + m.v.bias.data[:, None, None]
    means = np.concatenate([np.repeat(v[h * 16:(h + 1) * 16].mean(0, keepdims=True), 16, 0) for h in range(2)])
    ref = np.einsum("oc,chw->ohw", m.proj.weight.data[:, :, 0, 0], means) + m.proj.bias.data[:, None, None]
    assert np.max(np.abs(m(q_src, kv_src).data[0] - ref)) <= 1e-5


def test_cca_rows_sum_to_one_and_large_delta_flattens(rng):
    m = ChannelCrossAttention(32, rng=rng)
    x = Tensor(rng.standard_normal((2, 32, 6, 6)).astype(np.float32))
    attn = m.attention_map(x, x).data
    assert np.max(np.abs(attn.sum(-1) - 1)) <= 1e-6
    m.log_delta.data[...] = math.log(1e6)
    flat = m.attention_map(x, x).data
    assert np.max(np.abs(flat - 1 / 16)) <= 1e-4


def test_cca_rejects_wrong_width(rng):
    m = ChannelCrossAttention(32)
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 16, 4, 4), np.float32)), Tensor(np.zeros((1, 16, 4, 4), np.float32)))


# -- gradients through the learnable scalars ---------------------------------

@pytest.mark.parametrize("name", ["cab", "sab", "caa", "gla", "ahdda", "cca"])
def test_attention_fd(f64, rng, name):
    c = 16 if name == "cca" else 8
    build = {
        "cab": lambda: ChannelAttention(c, rng=rng),
        "sab": lambda: SpatialAttention(rng=rng),
        "caa": lambda: ContextAnchorAttention(c, strip=5, rng=rng),
        "gla": lambda: GlobalLocalAttention(c, rng=rng),
        "ahdda": lambda: HybridDualAttention(c, rng=rng),
        "cca": lambda: ChannelCrossAttention(c, rng=rng),
    }[name]
    m = randomize(build(), rng, 0.3)
    for p in m.parameters():
        if p.size == 1:
            p.data[...] = 0.3  # interior of the clamp so the blend weight carries gradient
    a = Tensor(rng.standard_normal((1, c, 7, 7)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, c, 7, 7)), requires_grad=True)
    call = (lambda: m(a)) if name in ("cab", "sab") else (lambda: m(a, b))
    res = check_module(m, call, [a, b] if name not in ("cab", "sab") else [a])
    assert res.passed, res.row()
