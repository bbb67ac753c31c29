"""Parameterized layers and the module tree they hang off.

``Module`` provides named parameter/buffer traversal (insertion order,
recursing through attributes, lists and dicts of submodules) which the
optimizer, checkpoint writer and freeze contract all rely on.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import DEFAULT_DTYPE, Tensor
from .errors import ConfigError


def xavier_init(shape, fan_in: int, fan_out: int, seed) -> np.ndarray:
    """Uniform draw in +-sqrt(6/(fan_in+fan_out)); variance 2/(fan_in+fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"fans must be positive, got ({fan_in}, {fan_out})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def named_parameters(self, prefix: str = ""):
        yield from self._walk(prefix, kind="param")

    def named_buffers(self, prefix: str = ""):
        """Non-learned state (batch-norm running stats) as named arrays."""
        yield from self._walk(prefix, kind="buffer")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _walk(self, prefix: str, kind: str):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            yield from _walk_value(name, value, kind)


def _walk_value(name, value, kind):
    if isinstance(value, Tensor):
        if kind == "param" and value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".", kind)
    elif isinstance(value, ops.BNState):
        if kind == "buffer":
            yield f"{name}.running_mean", value.mean
            yield f"{name}.running_var", value.var
            yield f"{name}.initialized", value._init_flag
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item, kind)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{name}.{key}", item, kind)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 dilation=1, rng=None, dtype=DEFAULT_DTYPE):
        k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.spec = ops.ConvSpec(in_channels, out_channels, k, stride, padding, dilation)
        fan_in = in_channels * k[0] * k[1]
        fan_out = out_channels * k[0] * k[1]
        self.weight = Tensor(xavier_init((out_channels, in_channels, *k),
                                         fan_in, fan_out, rng).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.bias.decay = False

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=DEFAULT_DTYPE):
        self.weight = Tensor(xavier_init((in_features, out_features),
                                         in_features, out_features, rng).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
        self.bias.decay = False

    def __call__(self, x):
        return ops.fully_connected(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.gamma.decay = False
        self.beta.decay = False
        self.state = ops.BNState(channels, dtype=dtype)

    def __call__(self, x, training: bool):
        return ops.batch_norm2d(x, self.gamma, self.beta, self.state, training)


class LayerNorm2d(Module):
    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.gamma.decay = False
        self.beta.decay = False

    def __call__(self, x):
        return ops.layer_norm2d(x, self.gamma, self.beta)
