"""Stateful layer wrappers that own their Parameters and cache one forward pass.

Each layer's ``backward`` consumes the cache of the most recent ``forward``,
accumulates into its parameters' ``grad`` and returns the input gradient.
Composite networks chain these by hand in reverse order.
"""
import numpy as np

from . import deform, tensor
from .errors import ConfigurationError
from .params import param_rng
from .tensor import Parameter


def _bind(params, name, shape, make):
    # reuse an existing entry so modules can be rebuilt over loaded params
    if name in params:
        p = params[name]
        if p.shape != tuple(shape):
            raise ConfigurationError(f"{name}: existing shape {p.shape} != required {tuple(shape)}")
        return p
    return params.add(Parameter(name, make()))


def _he(params, name, shape, fan_in, seed, dtype):
    return _bind(params, name, shape,
                 lambda: (param_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))


def _zeros(params, name, shape, dtype):
    return _bind(params, name, shape, lambda: np.zeros(shape, dtype=dtype))


class Conv2d:
    def __init__(self, params, name, cin, cout, k, *, seed, dtype, zero_init=False, bias=True):
        shape = (cout, cin, k, k)
        if zero_init:
            self.weight = _zeros(params, f"{name}.weight", shape, dtype)
        else:
            self.weight = _he(params, f"{name}.weight", shape, cin * k * k, seed, dtype)
        self.bias = _zeros(params, f"{name}.bias", (cout,), dtype) if bias else None
        self.padding = (k - 1) // 2
        self._cache = None

    def forward(self, x):
        b = None if self.bias is None else self.bias.value
        y, self._cache = tensor.conv2d_forward(x, self.weight.value, b, 1, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = tensor.conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class Deconv2d:
    def __init__(self, params, name, cin, cout, k=2, *, seed, dtype):
        self.weight = _he(params, f"{name}.weight", (cin, cout, k, k), cin, seed, dtype)
        self.bias = _zeros(params, f"{name}.bias", (cout,), dtype)
        self.k = k

    def forward(self, x):
        y, self._cache = tensor.deconv2d_forward(x, self.weight.value, self.bias.value, self.k)
        return y

    def backward(self, dy):
        dx, dw, db = tensor.deconv2d_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class MaxPool2d:
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        y, self._cache = tensor.maxpool2d_forward(x, self.k)
        return y

    def backward(self, dy):
        return tensor.maxpool2d_backward(dy, self._cache)


class ReLU:
    def forward(self, x):
        y, self._mask = tensor.relu_forward(x)
        return y

    def backward(self, dy):
        return tensor.relu_backward(dy, self._mask)


class DeformConv2d:
    """Deformable S x S conv whose offsets come from a zero-initialized conv head on its input."""

    def __init__(self, params, name, cin, cout, S=3, *, seed, dtype):
        self.offset_head = Conv2d(params, f"{name}.offset", cin, 2 * S * S, S,
                                  seed=seed, dtype=dtype, zero_init=True)
        self.weight = _he(params, f"{name}.weight", (cout, cin, S, S), cin * S * S, seed, dtype)
        self.bias = _zeros(params, f"{name}.bias", (cout,), dtype)

    def forward(self, x):
        off = self.offset_head.forward(x)
        y, self._cache = deform.deform_conv2d_forward(x, off, self.weight.value, self.bias.value)
        return y

    def backward(self, dy):
        dx, doff, dw, db = deform.deform_conv2d_backward(dy, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx + self.offset_head.backward(doff)


class ConvBlock:
    """Two 3x3 conv + ReLU stages; the first may be deformable."""

    def __init__(self, params, name, cin, cout, *, seed, dtype, deformable=False, S=3):
        if deformable:
            self.conv1 = DeformConv2d(params, f"{name}.conv1", cin, cout, S, seed=seed, dtype=dtype)
        else:
            self.conv1 = Conv2d(params, f"{name}.conv1", cin, cout, 3, seed=seed, dtype=dtype)
        self.conv2 = Conv2d(params, f"{name}.conv2", cout, cout, 3, seed=seed, dtype=dtype)
        self.layers = [self.conv1, ReLU(), self.conv2, ReLU()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy
