"""Adam with bias correction, over trainable parameters only."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter
from .tensor import ContractViolation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, betas, eps)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    masks: list[np.ndarray | None] | None = None,
) -> None:
    """One in-place Adam update of ``params``; ``state.t`` advances by one."""
    if lr <= 0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractViolation("params, grads and state have different lengths")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractViolation(f"grad shape {g.shape} != param shape {p.shape}")
        mask = masks[i] if masks is not None else None
        if mask is not None:
            g = g * mask
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        if mask is not None:
            p[mask] -= update[mask]
        else:
            p -= update


@dataclass
class Adam:
    """Stateful wrapper binding :func:`adam_step` to a list of Parameters."""

    params: list[Parameter]
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        frozen = [p.path for p in self.params if not p.trainable]
        if frozen:
            raise ContractViolation(f"frozen parameters passed to optimizer: {frozen[:3]}")
        self.state = AdamState.zeros_like([p.data for p in self.params], self.betas, self.eps)

    def step(self) -> None:
        adam_step(
            [p.tensor.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            [p.mask for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None
