"""Stateful layer wrappers around :mod:`gliomapipe.nn.ops`.

Each layer owns named parameters plus same-shaped gradient buffers, caches
what its backward pass needs, and accumulates into the buffers on backward.
"""
from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import ops
from .optim import xavier_init


class Layer:
    params: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    def __init__(self):
        self.params, self.grads, self.buffers = {}, {}, {}
        self._cache = None

    def _add_param(self, name, array):
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def named_params(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield name, p, self.grads[name]


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel=3, dtype=np.float32):
        super().__init__()
        self.pad = kernel // 2
        self._add_param("weight", np.zeros((c_out, c_in, kernel, kernel), dtype))
        self._add_param("bias", np.zeros(c_out, dtype))

    def init(self, rng):
        xavier_init(self.params["weight"], self.params["bias"], rng)

    def forward(self, x, training=True):
        out, self._cache = ops.conv2d_forward(x, self.params["weight"], self.params["bias"], self.pad)
        return out

    def backward(self, grad):
        gx, gw, gb = ops.conv2d_backward(grad, self._cache)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        self._cache = None
        return gx


class ConvTranspose2x2(Layer):
    def __init__(self, c_in, c_out, dtype=np.float32):
        super().__init__()
        self._add_param("weight", np.zeros((c_in, c_out, 2, 2), dtype))
        self._add_param("bias", np.zeros(c_out, dtype))

    def init(self, rng):
        xavier_init(self.params["weight"], self.params["bias"], rng, transposed=True)

    def forward(self, x, training=True):
        out, self._cache = ops.tconv2x2_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = ops.tconv2x2_backward(grad, self._cache)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        self._cache = None
        return gx


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self._add_param("gamma", np.ones(channels, dtype))
        self._add_param("beta", np.zeros(channels, dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def init(self, rng):
        self.params["gamma"][...] = 1
        self.params["beta"][...] = 0
        self.buffers["running_mean"][...] = 0
        self.buffers["running_var"][...] = 1

    def forward(self, x, training=True):
        out, self._cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum, self.eps,
        )
        return out

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._cache)
        self.grads["gamma"] += gg
        self.grads["beta"] += gb
        self._cache = None
        return gx


class ConvBlock:
    """Two rounds of 3x3 conv, batch norm and ReLU."""

    def __init__(self, c_in, c_out, dtype=np.float32):
        self.conv1 = Conv2d(c_in, c_out, 3, dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        self._masks = None

    def layers(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]

    def forward(self, x, training=True):
        x, m1 = ops.relu_forward(self.bn1.forward(self.conv1.forward(x, training), training))
        x, m2 = ops.relu_forward(self.bn2.forward(self.conv2.forward(x, training), training))
        self._masks = (m1, m2)
        return x

    def backward(self, grad):
        m1, m2 = self._masks
        grad = self.conv2.backward(self.bn2.backward(ops.relu_backward(grad, m2)))
        grad = self.conv1.backward(self.bn1.backward(ops.relu_backward(grad, m1)))
        self._masks = None
        return grad
