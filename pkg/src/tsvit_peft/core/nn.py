"""Parameters, modules and the two primitive layers (linear, layer-norm)."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .rng import Rng
from .tensor import Tensor, layer_norm, matmul


class Parameter:
    """A named, freezable tensor.

    ``mask`` optionally restricts training to a subset of elements (used for
    partial-bias and partial-token tuning); masked-out elements are never
    touched by the optimizer.
    """

    def __init__(self, data: np.ndarray, trainable: bool = True, path: str = ""):
        self.tensor = Tensor(np.asarray(data, dtype=np.float32), requires_grad=trainable)
        self.path = path
        self.mask: np.ndarray | None = None
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        self.tensor.requires_grad = bool(value)
        if not value:
            self.mask = None

    def set_mask(self, mask: np.ndarray | None) -> None:
        if mask is None:
            self.mask = None
            return
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.shape:
            raise ValueError(f"mask shape {mask.shape} != parameter shape {self.shape}")
        if mask.all():
            self.mask = None
            self.trainable = True
        elif not mask.any():
            self.trainable = False
        else:
            self.trainable = True
            self.mask = mask

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        value = np.asarray(value)
        if value.shape != self.shape:
            raise ValueError(f"{self.path}: shape {value.shape} != {self.shape}")
        self.tensor.data = value.astype(self.tensor.data.dtype, copy=True)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)

    @property
    def n_trainable(self) -> int:
        if not self._trainable:
            return 0
        return self.size if self.mask is None else int(self.mask.sum())

    def __repr__(self) -> str:
        return f"Parameter({self.path!r}, shape={self.shape}, trainable={self.n_trainable}/{self.size})"


class Module:
    """Tree of named parameters and sub-modules, addressed by dotted paths."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        self._params.pop(name, None)
        self._modules.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        self._params.pop(name, None)
        self._modules.pop(name, None)
        object.__delattr__(self, name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            path = f"{prefix}{name}"
            p.path = path
            yield path, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        w = xavier_uniform(rng, d_in, d_out) if rng is not None else np.zeros((d_in, d_out), np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight.tensor) + self.bias.tensor


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(d, np.float32))
        self.bias = Parameter(np.zeros(d, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight.tensor, self.bias.tensor, self.eps)
