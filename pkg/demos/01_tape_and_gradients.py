"""
Reverse-mode gradients on a small tape
======================================

Builds a tiny expression by hand, runs backward, and then lets the
finite-difference checker confirm the result.
"""

import numpy as np

from mmshr import tensor as T
from mmshr.gradcheck import gradcheck, run_suite
from mmshr.tensor import Tensor, default_dtype

# Everything below runs in float64 so the finite differences are meaningful.
with default_dtype(np.float64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    # loss = sum(sigmoid(x @ w) ** 2)
    y = T.sigmoid(T.matmul(x, w))
    loss = T.sum_(T.power(y, 2))
    loss.backward()
    print("loss", loss.item())
    print("dloss/dx\n", x.grad)

    # The same gradient by hand: d/dz sum(s(z)^2) = 2 s (1 - s) s
    s = 1 / (1 + np.exp(-(x.data @ w.data)))
    by_hand = (2 * s * s * (1 - s)) @ w.data.T
    print("max difference to the closed form", np.max(np.abs(by_hand - x.grad)))

    # The checker perturbs sampled coordinates and compares central differences.
    res = gradcheck(lambda: T.sigmoid(T.matmul(x, w)), [x, w])
    print("gradcheck:", res.row())

# A slice of the built-in suite: every conv variant and every attention block.
for r in run_suite(["conv2d*", "cab", "sab", "caa", "channel_cross_attention"]):
    print(r.row())
