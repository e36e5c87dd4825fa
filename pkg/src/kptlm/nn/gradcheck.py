"""Finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import torch

# fourth-order central stencil: offsets and weights (divided by h)
_STENCIL = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))


def numerical_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-3) -> list[torch.Tensor]:
    """Gradient of the scalar ``fn(*inputs)`` by a five-point central stencil on every entry.

    Truncation error is O(h^4) and roundoff about eps * |f| / h, both near
    1e-12 at the default step for O(1) functions.
    """
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                acc = 0.0
                for off, w in _STENCIL:
                    flat[i] = old + off * h
                    acc += w * float(fn(*inputs))
                flat[i] = old
                gflat[i] = acc / h
            grads.append(g)
    return grads


def max_relative_error(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                       h: float = 1e-3, floor: float = 1e-6) -> float:
    """Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over all inputs."""
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, inputs)]
    numeric = numerical_grad(fn, [x.detach() for x in inputs], h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
