"""AdamW with decoupled weight decay, applied to matrices only."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, tensors: dict) -> "AdamState":
        return cls(0, {k: torch.zeros_like(t) for k, t in tensors.items()},
                   {k: torch.zeros_like(t) for k, t in tensors.items()})


def decays(name: str, t: torch.Tensor) -> bool:
    return t.ndim >= 2


@torch.no_grad()
def optimizer_step(tensors: dict, grads: dict, state: AdamState, hp: AdamHyper, lr: float | None = None):
    """Update ``tensors`` in place and return (tensors, state)."""
    lr = hp.lr if lr is None else lr
    if not state.m:
        state.m = {k: torch.zeros_like(t) for k, t in tensors.items()}
        state.v = {k: torch.zeros_like(t) for k, t in tensors.items()}
    state.step += 1
    c1 = 1.0 - hp.beta1 ** state.step
    c2 = 1.0 - hp.beta2 ** state.step
    for name, t in tensors.items():
        g = grads[name]
        m = state.m[name].mul_(hp.beta1).add_(g, alpha=1 - hp.beta1)
        v = state.v[name].mul_(hp.beta2).addcmul_(g, g, value=1 - hp.beta2)
        if hp.weight_decay and decays(name, t):
            t.mul_(1.0 - lr * hp.weight_decay)
        t.sub_(lr * (m / c1) / ((v / c2).sqrt() + hp.eps))
    return tensors, state
