"""Stateful layer objects: parameters plus the forward cache backward needs.

Caches are confined to one training thread and are invalidated after each
backward so stale reuse fails loudly instead of corrupting gradients.
"""

from __future__ import annotations

import numpy as np

from ..errors import StateError
from . import functional as F
from .optim import NamedParam
from .params import (BatchNormState, LayerParams, Tensor, he_normal, layer_rng,
                     xavier_uniform)


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0, bias: bool = True, *, seed: int):
        self.name = name
        self.stride = stride
        self.pad = pad
        rng = layer_rng(seed, name)
        fan_in = in_channels * kernel * kernel
        weights = he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.params = LayerParams(weights, np.zeros(out_channels) if bias else np.zeros(0))
        self._input: Tensor | None = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        self._input = x if train else None
        return F.conv2d_forward(x, self.params, self.stride, self.pad)

    def backward(self, grad_out: Tensor) -> Tensor:
        x = F.require_cache(self._input, self.name)
        self._input = None
        return F.conv2d_backward(grad_out, x, self.params, self.stride, self.pad)

    def named_params(self) -> list[NamedParam]:
        out = [(f"{self.name}.weight", self.params.weights, self.params.grad_weights)]
        if self.params.has_bias:
            out.append((f"{self.name}.bias", self.params.bias, self.params.grad_bias))
        return out

    def zero_grad(self) -> None:
        self.params.zero_grad()


class ConvTranspose2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0, bias: bool = True, *, seed: int):
        self.name = name
        self.stride = stride
        self.pad = pad
        rng = layer_rng(seed, name)
        fan_in = in_channels * kernel * kernel
        weights = he_normal(rng, (in_channels, out_channels, kernel, kernel), fan_in)
        self.params = LayerParams(weights, np.zeros(out_channels) if bias else np.zeros(0))
        self._input: Tensor | None = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        self._input = x if train else None
        return F.conv_transpose2d_forward(x, self.params, self.stride, self.pad)

    def backward(self, grad_out: Tensor) -> Tensor:
        x = F.require_cache(self._input, self.name)
        self._input = None
        return F.conv_transpose2d_backward(grad_out, x, self.params, self.stride, self.pad)

    def named_params(self) -> list[NamedParam]:
        out = [(f"{self.name}.weight", self.params.weights, self.params.grad_weights)]
        if self.params.has_bias:
            out.append((f"{self.name}.bias", self.params.bias, self.params.grad_bias))
        return out

    def zero_grad(self) -> None:
        self.params.zero_grad()


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int,
                 bias: bool = True, *, seed: int):
        self.name = name
        rng = layer_rng(seed, name)
        weights = xavier_uniform(rng, (out_features, in_features), in_features, out_features)
        self.params = LayerParams(weights, np.zeros(out_features) if bias else np.zeros(0))
        self._input: Tensor | None = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        self._input = x if train else None
        return F.linear_forward(x, self.params)

    def backward(self, grad_out: Tensor) -> Tensor:
        x = F.require_cache(self._input, self.name)
        self._input = None
        return F.linear_backward(grad_out, x, self.params)

    def named_params(self) -> list[NamedParam]:
        out = [(f"{self.name}.weight", self.params.weights, self.params.grad_weights)]
        if self.params.has_bias:
            out.append((f"{self.name}.bias", self.params.bias, self.params.grad_bias))
        return out

    def zero_grad(self) -> None:
        self.params.zero_grad()


class BatchNorm2d:
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.params = LayerParams(np.ones(channels), np.zeros(channels))
        self.state = BatchNormState.create(channels)
        self._input: Tensor | None = None
        self._train_mode = True

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        self._input = x if train else None
        self._train_mode = train
        return F.batchnorm2d_forward(x, self.params, self.state, train,
                                     self.momentum, self.eps)

    def backward(self, grad_out: Tensor) -> Tensor:
        x = F.require_cache(self._input, self.name)
        self._input = None
        return F.batchnorm2d_backward(grad_out, x, self.params, self.state,
                                      self._train_mode, self.eps)

    def named_params(self) -> list[NamedParam]:
        return [
            (f"{self.name}.gamma", self.params.weights, self.params.grad_weights),
            (f"{self.name}.beta", self.params.bias, self.params.grad_bias),
        ]

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{self.name}.running_mean", self.state.running_mean),
            (f"{self.name}.running_var", self.state.running_var),
        ]

    def zero_grad(self) -> None:
        self.params.zero_grad()


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._input: Tensor | None = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        self._input = x if train else None
        return F.relu_forward(x)

    def backward(self, grad_out: Tensor) -> Tensor:
        x = F.require_cache(self._input, self.name)
        self._input = None
        return F.relu_backward(grad_out, x)


class MaxPool2d:
    def __init__(self, name: str, window: int, stride: int):
        self.name = name
        self.window = window
        self.stride = stride
        self._indices: Tensor | None = None
        self._input_shape: tuple[int, ...] | None = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        out, indices = F.maxpool2d_forward(x, self.window, self.stride)
        if train:
            self._indices = indices
            self._input_shape = x.shape
        else:
            self._indices = None
            self._input_shape = None
        return out

    def backward(self, grad_out: Tensor) -> Tensor:
        if self._indices is None or self._input_shape is None:
            raise StateError(f"{self.name}: backward called without a matching forward")
        indices, shape = self._indices, self._input_shape
        self._indices = None
        self._input_shape = None
        return F.maxpool2d_backward(grad_out, indices, shape, self.window, self.stride)
