"""2-D DFT pair and the frequency-domain feature processor.

The transform is unnormalized forward / ``1/(H*W)`` inverse. Power-of-two
lengths use an iterative radix-2 decimation-in-time kernel; other lengths go
through Bluestein's chirp-z reformulation on a padded power-of-two grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .functional import batch_norm2d, conv2d
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor, _record, add, concat, record_flops

__all__ = [
    "ComplexPlane",
    "fft",
    "fft2",
    "ifft2",
    "fft2d",
    "fft2d_real",
    "ifft2d",
    "FrequencyProcessor",
]


# -- raw complex kernels ----------------------------------------------

@lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _unit(phase: np.ndarray) -> np.ndarray:
    """exp(i*phase) with quarter-turn values snapped to exact 0/+-1."""
    z = np.exp(1j * phase)
    # genuine components are >= sin(2*pi/m), far above this for any realistic m
    z.real[np.abs(z.real) < 1e-14] = 0.0
    z.imag[np.abs(z.imag) < 1e-14] = 0.0
    return z


@lru_cache(maxsize=128)
def _twiddle(m: int, sign: int) -> np.ndarray:
    return _unit(sign * 2 * np.pi * np.arange(m // 2) / m)


@lru_cache(maxsize=32)
def _leaf(m: int, sign: int) -> np.ndarray:
    # the first log2(m) butterfly stages on a bit-reversed block == DFT with bit-reversed input rows
    j = _bitrev(m)[:, None]
    k = np.arange(m)[None, :]
    return _unit(sign * 2 * np.pi * ((j * k) % m) / m)


def _radix2(a: np.ndarray, sign: int) -> np.ndarray:
    n = a.shape[-1]
    lead = a.shape[:-1]
    a = a[..., _bitrev(n)]
    m = min(n, 16)
    a = (a.reshape(lead + (n // m, m)) @ _leaf(m, sign).astype(a.dtype)).reshape(lead + (n,))
    m *= 2
    while m <= n:
        half = m // 2
        blocks = a.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddle(m, sign).astype(a.dtype)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return a


@lru_cache(maxsize=64)
def _chirp(n: int, sign: int):
    k = np.arange(n)
    # k^2 mod 2n keeps the phase argument small for large n
    w = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    b[m - n + 1:] = np.conj(w[1:])[::-1]
    return w, m, _radix2(b, -1)


def _bluestein(a: np.ndarray, sign: int) -> np.ndarray:
    n = a.shape[-1]
    w, m, fb = _chirp(n, sign)
    buf = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    buf[..., :n] = a * w
    conv = _radix2(_radix2(buf, -1) * fb, 1) / m
    return conv[..., :n] * w


def fft(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized 1-D DFT along the last axis (``exp(-2 pi i jk/n)`` forward)."""
    a = np.asarray(a)
    a = a.astype(np.complex64 if a.dtype in (np.float32, np.complex64) else np.complex128)
    n = a.shape[-1]
    sign = 1 if inverse else -1
    if n == 1:
        return a.copy()
    if n & (n - 1) == 0:
        return _radix2(a, sign)
    return _bluestein(a, sign).astype(a.dtype, copy=False)


def fft2(a: np.ndarray) -> np.ndarray:
    """Forward 2-D DFT over the last two axes: rows, then columns."""
    out = fft(a)
    return np.swapaxes(fft(np.swapaxes(out, -1, -2)), -1, -2)


def ifft2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2:]
    out = fft(a, inverse=True)
    out = np.swapaxes(fft(np.swapaxes(out, -1, -2), inverse=True), -1, -2)
    return out / (h * w)


def _fft_flops(shape) -> float:
    h, w = shape[-2:]
    planes = int(np.prod(shape[:-2]))
    hw = h * w
    return 5.0 * hw * np.log2(hw) * planes if hw > 1 else 0.0


# -- taped transforms -------------------------------------------------

@dataclass
class ComplexPlane:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real/imag parts differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def _spectrum(x: Tensor) -> np.ndarray:
    if x.ndim < 2:
        raise ShapeError(f"fft2d needs at least 2 axes, got {x.shape}")
    record_flops(_fft_flops(x.shape))
    return fft2(x.data)


def fft2d_real(x: Tensor) -> Tensor:
    """Re(FFT2D(x)). The DFT matrix is symmetric, so the adjoint is Re(FFT2D(g))."""
    dtype = x.dtype
    z = _spectrum(x)
    return _record(z.real.astype(dtype), (x,), lambda g: (fft2(g).real.astype(dtype),))


def fft2d(x: Tensor) -> ComplexPlane:
    dtype = x.dtype
    z = _spectrum(x)
    re = _record(z.real.astype(dtype), (x,), lambda g: (fft2(g).real.astype(dtype),))
    im = _record(z.imag.astype(dtype), (x,), lambda g: (fft2(g).imag.astype(dtype),))
    return ComplexPlane(re, im)


def ifft2d(z: ComplexPlane | Tensor) -> Tensor:
    """Real part of the inverse 2-D DFT. A bare Tensor is read as a real-only spectrum."""
    if isinstance(z, Tensor):
        re, im = z, None
    else:
        re, im = z.re, z.im
    dtype = re.dtype
    record_flops(_fft_flops(re.shape))
    spec = re.data if im is None else re.data + 1j * im.data
    out = ifft2(spec).real.astype(dtype)

    def bw(g):
        zi = ifft2(g)
        if im is None:
            return (zi.real.astype(dtype),)
        return zi.real.astype(dtype), (-zi.imag).astype(dtype)

    parents = (re,) if im is None else (re, im)
    return _record(out, parents, bw)


# -- frequency processor ----------------------------------------------

class FrequencyProcessor(Module):
    """Spectral guidance branch.

    R = Re(FFT2D(F)); S = Conv1x1(BN(R)) + R; Y = Re(IFFT2D(S));
    output = Conv1x1(Concat(Y, F)) mapping 2C channels back to C.
    """

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.channels = channels
        self.bn = BatchNorm2d(channels)
        self.inner = Conv2d(channels, channels, 1, rng=rng)
        self.outer = Conv2d(2 * channels, channels, 1, rng=rng)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"axis 1 (channels): processor built for {self.channels}, got {f.shape}")
        r = fft2d_real(f)
        s = add(self.inner(self.bn(r)), r)
        y = ifft2d(s)
        return self.outer(concat([y, f], axis=1))

    def flops(self, n: int, h: int, w: int) -> float:
        c = self.channels
        hw = h * w
        return (2.0 * _fft_flops((n, c, h, w))
                + 2.0 * n * hw * (c * c + 2 * c * c))


def frequency_process_reference(f: Tensor, bn: BatchNorm2d, inner: Conv2d, outer: Conv2d) -> Tensor:
    """Step-by-step composition used as an oracle in tests (no fused module logic)."""
    r = fft2d_real(f)
    normed = batch_norm2d(r, bn.weight, bn.bias, bn.running_mean, bn.running_var, bn.training)
    s = add(conv2d(normed, inner.weight, inner.bias), r)
    y = ifft2d(s)
    return conv2d(concat([y, f], axis=1), outer.weight, outer.bias)
