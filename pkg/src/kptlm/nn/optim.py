"""AdamW with decoupled weight decay, plus gradient-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..errors import NonFiniteGradientError


@dataclass
class AdamWState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step_count: int = 0


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamWState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Apply one AdamW update in place.

    ``params`` and ``grads`` are keyed by parameter name; parameters without a
    gradient entry are skipped. All gradients are checked before any
    parameter is touched, so a non-finite gradient leaves the model intact.
    """
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = betas
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    with torch.no_grad():
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bias2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bias1)


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return total
