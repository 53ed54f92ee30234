"""Minimal parameter-holding layers on top of the tensor engine."""

import math

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base for parameter containers; traversal order follows attribute order."""

    def named_parameters(self, prefix=""):
        out = {}
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(rng, shape, std):
    if std == 0.0:
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
    return Tensor(rng.normal(shape, std=std), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, ksize, rng, stride=1, padding=0, zero_init=False):
        fan_in = cin * ksize * ksize
        std = 0.0 if zero_init else math.sqrt(2.0 / fan_in)
        self.weight = param(rng, (cout, cin, ksize, ksize), std)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        y = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)


class Linear(Module):
    def __init__(self, din, dout, rng, zero_init=False):
        std = 0.0 if zero_init else math.sqrt(1.0 / din)
        self.weight = param(rng, (din, dout), std)
        self.bias = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.matmul(x, self.weight) + self.bias


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.groups = groups
        self.eps = eps

    def __call__(self, x):
        return ops.group_norm(x, self.groups, self.gamma, self.beta, eps=self.eps)
