"""
Shift-window partitioning and the frequency branch
==================================================

Follows a single bright pixel through the omnidirectional shift and the
window fold, then looks at what the spectral processor does to a feature map.
"""

import numpy as np

from mmshr.shift_window import DIRECTIONS, ShiftWindowConfig, omni_shift, shift_window, shift_window_inverse
from mmshr.spectral import FrequencyProcessor, fft2d, ifft2d
from mmshr.tensor import Tensor, default_dtype, no_grad

# Eight channels, each holding an impulse at the centre of an 8x8 map.
x = np.zeros((1, 8, 8, 8), np.float32)
x[:, :, 4, 4] = 1.0
moved = omni_shift(Tensor(x), 2, 2).data
for ch, name in enumerate(DIRECTIONS):
    r, c = np.argwhere(moved[0, ch])[0]
    print(f"channel {ch} ({name:>10}): impulse now at row {r}, col {c}")

# The window fold turns a 2x2 grid of 4x4 windows into 4x the channels.
cfg = ShiftWindowConfig(2)
f = shift_window(Tensor(x), cfg)
print("windowed shape", f.shape, "shift used", f.shift)
back = shift_window_inverse(f)
print("round trip exact:", np.array_equal(back.data, x))

# Spectra: a constant plane puts all its energy in the DC bin.
with default_dtype(np.float64):
    z = fft2d(Tensor(np.full((1, 1, 4, 6), 0.5)))
    print("DC bin", z.re.data[0, 0, 0, 0], "other bins max", np.abs(z.numpy()[0, 0]).ravel()[1:].max())
    img = np.random.default_rng(1).standard_normal((1, 3, 12, 10))
    print("fft/ifft error", np.max(np.abs(ifft2d(fft2d(Tensor(img))).data - img)))

# The frequency processor normalizes, filters the spectrum with a 1x1 conv,
# returns to the spatial domain and projects again.
proc = FrequencyProcessor(16, rng=np.random.default_rng(2))
feat = Tensor(np.random.default_rng(3).standard_normal((2, 16, 8, 8)).astype(np.float32))
proc.eval()
with no_grad():
    out = proc(feat)
print("frequency processor output", out.shape, "mean |out|", float(np.abs(out.data).mean()))
