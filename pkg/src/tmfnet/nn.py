"""Layer modules: parameter containers around the functional ops."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import Tensor


class Module:
    """Base class tracking parameters, buffers and train/eval mode."""

    def __init__(self):
        self.training = True

    def modules(self):
        for _, m in self.named_modules():
            yield m

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}." if prefix else f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        sub = f"{prefix}{name}.{i}." if prefix else f"{name}.{i}."
                        yield from item.named_modules(sub)

    def named_parameters(self):
        for mod_name, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield f"{mod_name}{name}", value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mod_name, mod in self.named_modules():
            for name in getattr(mod, "_buffer_names", ()):
                yield f"{mod_name}{name}", getattr(mod, name)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        fan_in = in_channels * kernel * kernel
        self.weight = he_init(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)

    def macs(self, h: int, w: int):
        p = self.kernel // 2
        oh = (h + 2 * p - self.kernel) // self.stride + 1
        ow = (w + 2 * p - self.kernel) // self.stride + 1
        m = oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel
        return m, oh, ow


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    def macs(self, h: int, w: int):
        return h * w * self.channels, h, w


class ConvBnLeaky(Module):
    """conv -> batch norm -> leaky ReLU (slope 0.01), same-size output."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, rng,
                           stride=stride, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x)), 0.01)

    def macs(self, h: int, w: int):
        m, oh, ow = self.conv.macs(h, w)
        m += 2 * oh * ow * self.conv.out_channels  # bn + activation
        return m, oh, ow
