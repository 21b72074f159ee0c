"""Minimal module system: parameter registration, train/eval state, basic layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .functional import batch_norm2d, conv2d, layer_norm2d
from .tensor import Tensor, get_default_dtype

__all__ = ["Module", "ModuleList", "Conv2d", "BatchNorm2d", "LayerNorm2d", "scalar_param", "NO_DECAY"]

# learnable blend weights and attention temperature are kept out of weight decay
NO_DECAY = ("alpha", "beta", "log_delta")


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def scalar_param(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=get_default_dtype()), requires_grad=True)


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self.__dict__["_buffers"] = {}
        self._buffers[name] = value
        self.__dict__[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffers", {}):
            yield f"{prefix}{name}", self.__dict__[name]
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, items=()):
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self.__dict__[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride: int = 1, padding=None,
                 groups: int = 1, bias: bool = True, padding_mode: str = "zero",
                 init: str = "he", rng=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        self.groups = groups
        self.padding_mode = padding_mode
        dtype = get_default_dtype()
        shape = (c_out, c_in // groups, kh, kw)
        if init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        else:
            fan_in = (c_in // groups) * kh * kw
            w = (_rng(rng).standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode, self.groups)

    def n_params(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def flops(self, n: int, h: int, w: int) -> float:
        """FLOPs (2 x MACs) on an (n, c_in, h, w) input."""
        ho, wo = self.out_hw(h, w)
        kh, kw = self.kernel
        return 2.0 * n * self.c_out * (self.c_in // self.groups) * kh * kw * ho * wo

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = (self.padding, self.padding) if isinstance(self.padding, int) else self.padding
        kh, kw = self.kernel
        return (h + 2 * ph - kh) // self.stride + 1, (w + 2 * pw - kw) // self.stride + 1


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        dtype = get_default_dtype()
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum)


class LayerNorm2d(Module):
    def __init__(self, channels: int):
        dtype = get_default_dtype()
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm2d(x, self.weight, self.bias)
