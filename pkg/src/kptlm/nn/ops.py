"""Differentiable building blocks for the keypoint language model.

Every op is a plain function over ``torch.Tensor`` so that autograd records
the graph; weights follow the ``input @ W`` convention (``W`` is
``d_in x d_out``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..errors import ConfigError, EmptySupervisionError, ShapeError


@dataclass
class AdapterPair:
    """Low-rank delta ``scale * down @ up`` added to a frozen projection."""

    down: torch.Tensor  # d_in x r
    up: torch.Tensor  # r x d_out
    scale: float = 1.0

    def __post_init__(self):
        d_in, r = self.down.shape
        r2, d_out = self.up.shape
        if r != r2:
            raise ShapeError(f"adapter rank mismatch: down {tuple(self.down.shape)} vs up {tuple(self.up.shape)}")
        if r > min(d_in, d_out):
            raise ConfigError(f"adapter rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.down @ self.up)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           adapter: AdapterPair | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    out = x @ weight
    if adapter is not None:
        out = out + adapter.scale * ((x @ adapter.down) @ adapter.up)
    if bias is not None:
        out = out + bias
    return out


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def mlp_block(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
              w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def embedding_lookup(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"token id out of range for embedding table of size {table.shape[0]}")
    return table[ids]


def causal_attention(x: torch.Tensor, heads: int,
                     wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor, wo: torch.Tensor,
                     bq: torch.Tensor | None = None, bk: torch.Tensor | None = None,
                     bv: torch.Tensor | None = None, bo: torch.Tensor | None = None,
                     q_adapter: AdapterPair | None = None, v_adapter: AdapterPair | None = None,
                     past: tuple[torch.Tensor, torch.Tensor] | None = None,
                     return_weights: bool = False):
    """Multi-head self-attention where position i only sees positions <= i.

    ``x`` is ``(n, D)`` or ``(B, n, D)``. ``past`` holds cached keys and values
    ``(B, heads, n_past, D/heads)`` for incremental decoding; the new positions
    are placed after them. Returns ``out`` or ``(out, weights, (k, v))`` when
    ``return_weights`` is set.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    B, n, D = x.shape
    if D % heads:
        raise ConfigError(f"model width {D} is not divisible by {heads} heads")
    hd = D // heads

    def split(t):
        return t.reshape(B, n, heads, hd).transpose(1, 2)

    q = split(linear(x, wq, bq, q_adapter))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv, v_adapter))
    n_past = 0
    if past is not None:
        n_past = past[0].shape[2]
        k = torch.cat([past[0], k], dim=2)
        v = torch.cat([past[1], v], dim=2)

    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    q_pos = torch.arange(n_past, n_past + n).unsqueeze(1)
    k_pos = torch.arange(n_past + n).unsqueeze(0)
    scores = scores.masked_fill(k_pos > q_pos, float("-inf"))
    weights = softmax(scores, dim=-1)
    ctx = (weights @ v).transpose(1, 2).reshape(B, n, D)
    out = linear(ctx, wo, bo)
    if squeeze:
        out = out.squeeze(0)
    if return_weights:
        return out, weights, (k, v)
    return out


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is 1.

    Masked-out positions contribute exactly zero, even if their logits are
    extreme.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"cross entropy: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)} disagree")
    if mask.numel() and not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask entries must be 0 or 1")
    total = mask.sum()
    if float(total) == 0:
        raise EmptySupervisionError("mask selects no positions; nothing to supervise")
    logp = log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    nll = torch.where(mask.bool(), nll, torch.zeros_like(nll))
    return nll.sum() / total.to(nll.dtype)
