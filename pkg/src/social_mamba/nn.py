"""Parameter containers and the small dense layers used by every block."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter registry.

    Tensors that require grad, sub-modules and lists of sub-modules assigned as
    attributes are discovered in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for n, p in own.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: expected shape {list(p.shape)}, got {list(arr.shape)}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ W + b`` on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float | None = None):
        bound = 1.0 / math.sqrt(d_in) if scale is None else scale
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        # nonzero bias so all-zero inputs (padded future slots) still map to a nonzero vector
        self.bias = param(rng.uniform(-bound, bound, size=d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return ad.reshape(y, lead + (y.shape[-1],)) if x.ndim != 2 else y


class MLP(Module):
    """Two dense layers with SiLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.silu(self.fc1(x)))
