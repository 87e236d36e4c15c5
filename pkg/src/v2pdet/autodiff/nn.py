"""Layers built on the autodiff tensor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, relu


class Module:
    """Parameter container; attributes that are tensors or modules are discovered recursively."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias=True):
        self.din, self.dout = din, dout
        self.weight = Tensor(kaiming_uniform(rng, din, (din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise ValueError(f"Linear expects input width {self.din}, got input of shape {x.shape}"
                             f" against weight of shape {self.weight.shape}")
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activate_last: bool = False
    bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"MLP needs an input width and at least one layer, got {self.widths}")


class MLP(Module):
    """Affine layers with ReLU between them; the last layer is linear unless ``activate_last``."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = [Linear(a, b, rng, bias=spec.bias) for a, b in zip(spec.widths[:-1], spec.widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.spec.activate_last:
                x = relu(x)
        return x


def mlp(widths, rng, activate_last=True) -> MLP:
    return MLP(MlpSpec(tuple(widths), activate_last=activate_last), rng)


def mlp_forward(spec: MlpSpec, params, x: Tensor) -> Tensor:
    """Functional form: ``params`` is a list of (weight, bias) pairs."""
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"MLP input width {spec.widths[0]} does not match input of shape {x.shape}")
    n = len(params)
    for i, (w, b) in enumerate(params):
        if w.shape != (spec.widths[i], spec.widths[i + 1]):
            raise ValueError(f"layer {i} weight shape {w.shape} does not match the layer widths "
                             f"{(spec.widths[i], spec.widths[i + 1])}")
        x = matmul(x, w)
        if b is not None:
            x = x + b
        if i < n - 1 or spec.activate_last:
            x = relu(x)
    return x
