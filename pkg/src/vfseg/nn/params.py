"""Parameter containers for manually differentiated layers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray

_EMPTY = np.zeros(0, dtype=np.float64)


def as_tensor(values) -> Tensor:
    """Materialize values as a C-contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-layer generator keyed by (seed, layer name).

    PCG64 streams are fixed by numpy's spec, so the same (seed, name)
    yields identical weights on any platform or process. Keying by name
    lets two parties initialize disjoint shards of one model and still
    agree bit-for-bit with a monolithic build.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))
    )


@dataclass
class LayerParams:
    """Trainable weights plus their accumulated gradients.

    Gradient arrays always mirror the parameter shapes; `bias` may be the
    empty array for bias-free layers.
    """

    weights: Tensor
    bias: Tensor = field(default_factory=lambda: _EMPTY.copy())
    grad_weights: Tensor = field(default_factory=lambda: _EMPTY.copy())
    grad_bias: Tensor = field(default_factory=lambda: _EMPTY.copy())

    def __post_init__(self) -> None:
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.grad_weights.shape != self.weights.shape:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias.shape != self.bias.shape:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def has_bias(self) -> bool:
        return self.bias.size > 0

    def zero_grad(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)


@dataclass
class BatchNormState:
    """Running statistics updated by train-mode forward passes."""

    running_mean: Tensor
    running_var: Tensor

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Gaussian init scaled for ReLU nonlinearities."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Uniform init balancing forward/backward variance for linear layers."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
