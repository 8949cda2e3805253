"""Stateful layer wrappers around the kernels.

A layer owns its parameter arrays (``params``), their gradients (``grads``)
and non-trainable ``buffers``. ``forward`` caches what ``backward`` needs;
``backward`` accumulates into ``grads`` and returns the input gradient.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np

from . import kernels as K
from .kernels.norm import BatchNormState, GrnState

_impl = "fast"


def get_impl() -> str:
    return _impl


@contextlib.contextmanager
def use_impl(impl: str):
    """Temporarily route every layer through the ``naive`` or ``fast`` kernels."""
    global _impl
    if impl not in K.IMPLS:
        raise ValueError(f"impl must be one of {K.IMPLS}, got {impl!r}")
    prev, _impl = _impl, impl
    try:
        yield
    finally:
        _impl = prev


def kaiming_uniform(rng, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return ((rng.uniform(math.prod(shape)) * 2.0 - 1.0) * bound).reshape(shape).astype(dtype)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def children(self) -> Sequence[tuple[str, "Layer"]]:
        return ()

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, "Layer", str]]:
        """Yield (qualified name, owning layer, local key) in construction order."""
        for key in self.params:
            yield prefix + key, self, key
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, buf in self.buffers.items():
            yield prefix + key, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _saved(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class _ConvBase(Layer):
    def __init__(self, weight, bias: bool):
        super().__init__()
        self._add_param("weight", weight)
        if bias:
            self._add_param("bias", np.zeros(weight.shape[0], weight.dtype))

    def _with_bias(self, y):
        return K.bias_add(y, self.params["bias"]) if "bias" in self.params else y

    def _bias_grad(self, dy):
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=(0, 2, 3))


class Conv2d(_ConvBase):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, bias=False, dtype=np.float32):
        super().__init__(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), bias)
        self.spec = K.ConvSpec(k, stride, 1, padding)

    def forward(self, x, train=True):
        self._cache = x
        return self._with_bias(K.conv2d(x, self.params["weight"], self.spec, _impl))

    def backward(self, dy):
        self._bias_grad(dy)
        dx, dw = K.conv2d_backward(dy, self._saved(), self.params["weight"], self.spec, _impl)
        self.grads["weight"] += dw
        return dx


class DWConv(_ConvBase):
    def __init__(self, rng, channels, k, stride=1, dilation=1, padding=None, bias=False,
                 dtype=np.float32):
        super().__init__(kaiming_uniform(rng, (channels, 1, k, k), k * k, dtype), bias)
        if padding is None:
            padding = dilation * (k - 1) // 2
        self.spec = K.ConvSpec(k, stride, dilation, padding)

    def forward(self, x, train=True):
        self._cache = x
        return self._with_bias(K.dwconv2d(x, self.params["weight"], self.spec, _impl))

    def backward(self, dy):
        self._bias_grad(dy)
        dx, dw = K.dwconv2d_backward(dy, self._saved(), self.params["weight"], self.spec, _impl)
        self.grads["weight"] += dw
        return dx


class GroupedDilatedDWConv(_ConvBase):
    def __init__(self, rng, channels, dilations, k=3, bias=False, dtype=np.float32):
        super().__init__(kaiming_uniform(rng, (channels, 1, k, k), k * k, dtype), bias)
        self.dilations = list(dilations)

    def forward(self, x, train=True):
        self._cache = x
        return self._with_bias(K.grouped_dilated_dwconv(x, self.params["weight"], self.dilations, _impl))

    def backward(self, dy):
        self._bias_grad(dy)
        dx, dw = K.grouped_dilated_dwconv_backward(dy, self._saved(), self.params["weight"],
                                                   self.dilations, _impl)
        self.grads["weight"] += dw
        return dx


class GroupedPWConv(_ConvBase):
    def __init__(self, rng, cin, cout, groups, bias=False, dtype=np.float32):
        super().__init__(kaiming_uniform(rng, (cout, cin // groups, 1, 1), cin // groups, dtype), bias)
        self.groups = groups

    def forward(self, x, train=True):
        self._cache = x
        return self._with_bias(K.grouped_pointwise_conv(x, self.params["weight"], self.groups, _impl))

    def backward(self, dy):
        self._bias_grad(dy)
        dx, dw = K.grouped_pointwise_conv_backward(dy, self._saved(), self.params["weight"],
                                                   self.groups, _impl)
        self.grads["weight"] += dw
        return dx


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        st = BatchNormState.fresh(channels, dtype)
        self._add_param("gamma", st.gamma)
        self._add_param("beta", st.beta)
        self.buffers["running_mean"] = st.running_mean
        self.buffers["running_var"] = st.running_var

    @property
    def state(self) -> BatchNormState:
        # rebuilt on access so in-place loads of params/buffers are always seen
        return BatchNormState(self.params["gamma"], self.params["beta"],
                              self.buffers["running_mean"], self.buffers["running_var"])

    def forward(self, x, train=True):
        mode = "train" if train else "infer"
        self._cache = (x, mode)
        return K.batchnorm(x, self.state, mode)

    def backward(self, dy):
        x, mode = self._saved()
        dx, dg, db = K.batchnorm_backward(dy, x, self.state, mode)
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        return dx


class GRN(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        st = GrnState.fresh(channels, dtype)
        self._add_param("gamma", st.gamma)
        self._add_param("beta", st.beta)

    @property
    def state(self) -> GrnState:
        return GrnState(self.params["gamma"], self.params["beta"])

    def forward(self, x, train=True):
        self._cache = x
        return K.grn(x, self.state)

    def backward(self, dy):
        dx, dg, db = K.grn_backward(dy, self._saved(), self.state)
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        return dx


class ReLU6(Layer):
    def forward(self, x, train=True):
        self._cache = x
        return K.relu6(x)

    def backward(self, dy):
        return K.relu6_backward(dy, self._saved())


class Pool(Layer):
    def __init__(self, kind, k=2, s=2, ceil_mode=True):
        super().__init__()
        self.kind, self.k, self.s, self.ceil_mode = kind, k, s, ceil_mode

    def forward(self, x, train=True):
        self._cache = x
        return K.pool2d(x, self.kind, self.k, self.s, self.ceil_mode, _impl)

    def backward(self, dy):
        return K.pool2d_backward(dy, self._saved(), self.kind, self.k, self.s, self.ceil_mode, _impl)


class Linear(Layer):
    def __init__(self, rng, fin, fout, dtype=np.float32):
        super().__init__()
        self._add_param("weight", kaiming_uniform(rng, (fout, fin), fin, dtype))
        self._add_param("bias", np.zeros(fout, dtype))

    def forward(self, x, train=True):
        self._cache = x
        return K.linear(x, self.params["weight"], self.params["bias"])

    def backward(self, dy):
        dx, dw, db = K.linear_backward(dy, self._saved(), self.params["weight"], self.params["bias"])
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class Sequential(Layer):
    def __init__(self, *named: tuple[str, Layer]):
        super().__init__()
        self.layers = list(named)

    def children(self):
        return self.layers

    def forward(self, x, train=True):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy
