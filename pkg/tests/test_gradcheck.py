import numpy as np

from mmshr import tensor as T
from mmshr.gradcheck import SUITE, gradcheck, run_suite
from mmshr.tensor import Tensor


def _wrong_square(a):
    # forward a**2 with a deliberately off-by-10% backward
    return T._record(a.data ** 2, (a,), lambda g: (g * 2.2 * a.data,))


def test_detects_wrong_backward(f64, rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    res = gradcheck(lambda: _wrong_square(x), [x])
    assert not res.passed and res.max_rel_err > 0.05


def test_accepts_correct_backward(f64, rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    res = gradcheck(lambda: T.power(x, 2), [x])
    assert res.passed and res.max_rel_err <= 1e-6 and res.skipped == 0


def test_kink_coordinates_are_redrawn(f64):
    # half the entries sit on the ReLU kink, so the first draws must hit some
    x = Tensor(np.array([0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 2.0, -2.0]), requires_grad=True)
    res = gradcheck(lambda: T.relu(x), [x], n_coords=8)
    assert res.skipped > 0 and res.max_rel_err <= 1e-8


def test_every_leaf_sampled(f64, rng):
    a = Tensor(rng.standard_normal(2), requires_grad=True)
    big = Tensor(rng.standard_normal(500), requires_grad=True)
    res = gradcheck(lambda: T.add(T.sum_(a), T.sum_(big)), [a, big], n_coords=1)
    assert res.n_coords == 3


def test_selection_by_name_kind_and_prefix():
    assert [r.name for r in run_suite(["relu"])] == ["relu"]
    conv = [n for k, n, _ in SUITE if n.startswith("conv2d")]
    assert [r.name for r in run_suite(["conv2d*"], n_coords=4)] == conv
    losses = run_suite(["loss"], n_coords=4)
    assert [r.name for r in losses] == [n for k, n, _ in SUITE if k == "loss"]
    assert all(r.passed for r in losses)


def test_suite_covers_every_layer_kind():
    names = {n for _, n, _ in SUITE}
    for required in ("conv2d", "batch_norm2d_train", "softmax", "fft2d", "ifft2d_complex", "omni_shift",
                     "window_divide", "cab", "sab", "caa", "gla", "ahdda", "channel_cross_attention",
                     "oaiblock", "hddaconv", "hdctransformer", "double_out", "loss_total"):
        assert required in names
