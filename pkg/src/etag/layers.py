"""Parameter containers shared by the solver and the generator."""

from __future__ import annotations

import copy

import numpy as np

from .autodiff import Tensor, bias_add, conv2d, matmul, relu, transpose
from .errors import DomainError


def init_weight(shape, fan_in: int, rng: np.random.Generator | None, init: str = "he") -> Tensor:
    """Fan-in scaled Gaussian (std = sqrt(2 / fan_in)) or all zeros."""
    if init == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True)
    if init != "he":
        raise DomainError(f"unknown init scheme {init!r}")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Module:
    """Tree of named parameters. Subclasses list child attributes in ``_children``."""

    _children: tuple[str, ...] = ()
    frozen = False

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name in self._children:
            value = getattr(self, name)
            if isinstance(value, Tensor):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def frozen_copy(self):
        """Deep copy with gradients disabled; repeated calls on a frozen copy are no-ops."""
        if self.frozen:
            return self
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.requires_grad = False
            p.grad = None
            p.op = None
        twin.frozen = True
        return twin

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.shape:
                raise DomainError(f"parameter {name}: stored shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


class Linear(Module):
    """Affine map with weight stored as (out, in), so rows index output units."""

    _children = ("weight", "bias")

    def __init__(self, n_in: int, n_out: int, rng, init: str = "he", bias: bool = True):
        self.weight = init_weight((n_out, n_in), n_in, rng, init)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
        if not bias:
            self._children = ("weight",)

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, transpose(self.weight))
        return out if self.bias is None else bias_add(out, self.bias)

    def add_outputs(self, n_new: int, rng, init: str = "he") -> None:
        """Append ``n_new`` output rows; existing rows are kept bit for bit."""
        n_in = self.weight.shape[1]
        fresh = init_weight((n_new, n_in), n_in, rng, init).data
        self.weight = Tensor(np.concatenate([self.weight.data, fresh]),
                             requires_grad=self.weight.requires_grad)
        if self.bias is not None:
            self.bias = Tensor(np.concatenate([self.bias.data, np.zeros(n_new)]),
                               requires_grad=self.bias.requires_grad)


class ConvBlock(Module):
    """3x3 convolution followed by ReLU."""

    _children = ("weight", "bias")

    def __init__(self, c_in: int, c_out: int, stride: int, rng, init: str = "he"):
        self.stride = stride
        self.weight = init_weight((3, 3, c_in, c_out), 9 * c_in, rng, init)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(conv2d(x, self.weight, self.bias, self.stride))


class MLP(Module):
    """Fully connected net with ReLU between layers and a linear output."""

    _children = ("layers",)

    def __init__(self, sizes: list[int], rng, init: str = "he"):
        self.layers = [Linear(a, b, rng, init) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
