"""SGD with momentum and Adam over named parameter triples."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .params import Tensor

# Each entry: (name, data, grad). data/grad are views into LayerParams
# arrays, so in-place updates reach the owning layer.
NamedParam = tuple[str, Tensor, Tensor]


class SGD:
    """v <- m v + g; w <- w - lr v."""

    kind = "sgd"

    def __init__(self, params: list[NamedParam], lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(data) for name, data, _ in self.params}

    def step(self) -> None:
        for name, data, grad in self.params:
            v = self.velocity[name]
            v *= self.momentum
            v += grad
            data -= self.lr * v

    def state_tensors(self) -> dict[str, Tensor]:
        return {f"opt.sgd.v.{name}": v for name, v in self.velocity.items()}

    def load_state(self, tensors: dict[str, Tensor]) -> None:
        for name in self.velocity:
            key = f"opt.sgd.v.{name}"
            if key not in tensors:
                raise ConfigurationError(f"optimizer state missing {key}")
            if tensors[key].shape != self.velocity[name].shape:
                raise ConfigurationError(f"optimizer state shape mismatch for {key}")
            self.velocity[name][...] = tensors[key]


class Adam:
    """Adam with standard bias correction."""

    kind = "adam"

    def __init__(self, params: list[NamedParam], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(data) for name, data, _ in self.params}
        self.v = {name: np.zeros_like(data) for name, data, _ in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, data, grad in self.params:
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {f"opt.adam.m.{name}": m for name, m in self.m.items()}
        out.update({f"opt.adam.v.{name}": v for name, v in self.v.items()})
        out["opt.adam.t"] = np.array([float(self.t)])
        return out

    def load_state(self, tensors: dict[str, Tensor]) -> None:
        if "opt.adam.t" not in tensors:
            raise ConfigurationError("optimizer state missing opt.adam.t")
        self.t = int(tensors["opt.adam.t"][0])
        for slot, store in (("m", self.m), ("v", self.v)):
            for name in store:
                key = f"opt.adam.{slot}.{name}"
                if key not in tensors:
                    raise ConfigurationError(f"optimizer state missing {key}")
                if tensors[key].shape != store[name].shape:
                    raise ConfigurationError(f"optimizer state shape mismatch for {key}")
                store[name][...] = tensors[key]


def make_optimizer(kind: str, params: list[NamedParam], lr: float,
                   momentum: float = 0.9):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ConfigurationError(f"unknown optimizer '{kind}' (expected sgd or adam)")
