"""Image encoder + projection + decoder-only language model + logit head.

Image tokens ``V = f(x) @ W_proj`` are placed before the text embeddings and
the joint sequence runs through a causal transformer; ``Y = Z @ W_logit``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContextOverflowError, ShapeError
from .nn import ops
from .nn.checkpoint import load_checkpoint, save_checkpoint

FINETUNE_MODES = ("frozen", "adapters", "full", "pretrain")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    C: int = 128  # encoder width
    D: int = 128  # language model width
    enc_depth: int = 2
    enc_heads: int = 4
    lm_depth: int = 4
    heads: int = 4
    context: int = 1024
    vocab_size: int = 83
    rank: int = 8
    adapter_alpha: float = 16.0
    mlp_ratio: int = 4
    finetune_mode: str = "full"

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch {self.patch}")
        if self.C % self.enc_heads:
            raise ConfigError(f"encoder width {self.C} is not divisible by {self.enc_heads} heads")
        if self.D % self.heads:
            raise ConfigError(f"model width {self.D} is not divisible by {self.heads} heads")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(f"unknown finetune mode {self.finetune_mode!r}; choose from {FINETUNE_MODES}")
        if self.rank < 0 or self.rank > min(self.C, self.D):
            raise ConfigError(f"adapter rank {self.rank} out of range")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(shape, gen, std=0.02):
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position table of shape ``(grid*grid, dim)``."""
    quarter = dim // 4
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64),
                            indexing="ij")
    parts = []
    for coord in (xs.reshape(-1), ys.reshape(-1)):
        ang = coord[:, None] * freq[None, :]
        parts += [torch.sin(ang), torch.cos(ang)]
    table = torch.cat(parts, dim=1)
    if table.shape[1] < dim:
        table = torch.cat([table, torch.zeros(table.shape[0], dim - table.shape[1], dtype=table.dtype)], dim=1)
    return table


class Block(nn.Module):
    """Pre-norm transformer block with optional low-rank adapters on q and v."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.rank = rank
        self.scale = alpha / rank if rank else 0.0
        P = nn.Parameter
        self.ln1_g, self.ln1_b = P(torch.ones(width)), P(torch.zeros(width))
        self.wq, self.bq = P(_trunc_normal((width, width), gen)), P(torch.zeros(width))
        self.wk, self.bk = P(_trunc_normal((width, width), gen)), P(torch.zeros(width))
        self.wv, self.bv = P(_trunc_normal((width, width), gen)), P(torch.zeros(width))
        self.wo, self.bo = P(_trunc_normal((width, width), gen)), P(torch.zeros(width))
        self.ln2_g, self.ln2_b = P(torch.ones(width)), P(torch.zeros(width))
        hidden = width * mlp_ratio
        self.w1, self.b1 = P(_trunc_normal((width, hidden), gen)), P(torch.zeros(hidden))
        self.w2, self.b2 = P(_trunc_normal((hidden, width), gen)), P(torch.zeros(width))
        if rank:
            self.q_adapter_down = P(_trunc_normal((width, rank), gen))
            self.q_adapter_up = P(torch.zeros(rank, width))
            self.v_adapter_down = P(_trunc_normal((width, rank), gen))
            self.v_adapter_up = P(torch.zeros(rank, width))
        self.use_adapters = bool(rank)

    def adapters(self):
        if not (self.rank and self.use_adapters):
            return None, None
        return (ops.AdapterPair(self.q_adapter_down, self.q_adapter_up, self.scale),
                ops.AdapterPair(self.v_adapter_down, self.v_adapter_up, self.scale))

    def forward(self, x, past=None):
        qa, va = self.adapters()
        h = ops.layernorm(x, self.ln1_g, self.ln1_b)
        a, _, kv = ops.causal_attention(h, self.heads, self.wq, self.wk, self.wv, self.wo,
                                        self.bq, self.bk, self.bv, self.bo, qa, va, past=past,
                                        return_weights=True)
        x = x + a
        x = x + ops.mlp_block(ops.layernorm(x, self.ln2_g, self.ln2_b), self.w1, self.b1, self.w2, self.b2)
        return x, kv


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_w = nn.Parameter(_trunc_normal((cfg.patch * cfg.patch * 3, cfg.C), gen))
        self.patch_b = nn.Parameter(torch.zeros(cfg.C))
        self.register_buffer("pos", sincos_2d(cfg.image_size // cfg.patch, cfg.C).float(), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.C, cfg.enc_heads, cfg.mlp_ratio, cfg.rank, cfg.adapter_alpha, gen)
                                    for _ in range(cfg.enc_depth))
        self.ln_g, self.ln_b = nn.Parameter(torch.ones(cfg.C)), nn.Parameter(torch.zeros(cfg.C))

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, _ = x.shape
        p = self.cfg.patch
        x = x.reshape(B, H // p, p, W // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # non-causal: each patch sees the whole image
        h = ops.linear(self.patchify(x), self.patch_w, self.patch_b) + self.pos.to(x.dtype)
        for blk in self.blocks:
            h = _bidirectional(blk, h)
        return ops.layernorm(h, self.ln_g, self.ln_b)


def _bidirectional(blk: Block, x: torch.Tensor) -> torch.Tensor:
    qa, va = blk.adapters()
    h = ops.layernorm(x, blk.ln1_g, blk.ln1_b)
    B, n, D = h.shape
    hd = D // blk.heads

    def split(t):
        return t.reshape(B, n, blk.heads, hd).transpose(1, 2)

    q = split(ops.linear(h, blk.wq, blk.bq, qa))
    k = split(ops.linear(h, blk.wk, blk.bk))
    v = split(ops.linear(h, blk.wv, blk.bv, va))
    w = ops.softmax((q @ k.transpose(-1, -2)) / math.sqrt(hd), dim=-1)
    ctx = (w @ v).transpose(1, 2).reshape(B, n, D)
    x = x + ops.linear(ctx, blk.wo, blk.bo)
    return x + ops.mlp_block(ops.layernorm(x, blk.ln2_g, blk.ln2_b), blk.w1, blk.b1, blk.w2, blk.b2)


@dataclass
class DecodeState:
    """Key/value cache of one sequence (image tokens plus a text prefix)."""

    past: list[tuple[torch.Tensor, torch.Tensor]]
    hidden: torch.Tensor  # (n_total, D) final hidden states
    text_ids: list[int]
    n_image: int

    def truncate(self, n_text: int) -> "DecodeState":
        n = self.n_image + n_text
        return DecodeState([(k[:, :, :n], v[:, :, :n]) for k, v in self.past], self.hidden[:n],
                           self.text_ids[:n_text], self.n_image)


class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.encoder = ImageEncoder(cfg, gen)
        self.proj = nn.Parameter(_trunc_normal((cfg.C, cfg.D), gen))
        self.tok_emb = nn.Parameter(_trunc_normal((cfg.vocab_size, cfg.D), gen))
        self.pos_emb = nn.Parameter(_trunc_normal((cfg.context, cfg.D), gen))
        self.blocks = nn.ModuleList(Block(cfg.D, cfg.heads, cfg.mlp_ratio, cfg.rank, cfg.adapter_alpha, gen)
                                    for _ in range(cfg.lm_depth))
        self.ln_g, self.ln_b = nn.Parameter(torch.ones(cfg.D)), nn.Parameter(torch.zeros(cfg.D))
        self.logit = nn.Parameter(_trunc_normal((cfg.D, cfg.vocab_size), gen))
        self.to(dtype)
        set_finetune_mode(self, cfg.finetune_mode)

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.dtype

    def set_adapters_enabled(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, Block):
                m.use_adapters = enabled

    # -- encoding ------------------------------------------------------------
    def _as_images(self, x) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(self.dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        s = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (s, s, 3):
            raise ShapeError(f"expected image of shape ({s}, {s}, 3), got {tuple(x.shape)}; resize before encoding")
        return x

    def encode_image(self, x) -> torch.Tensor:
        """``(H, W, 3)`` or ``(B, H, W, 3)`` image(s) to image tokens ``(B, N_v, D)``."""
        return ops.linear(self.encoder(self._as_images(x)), self.proj)

    def _check_length(self, n: int) -> None:
        if n > self.cfg.context:
            raise ContextOverflowError(f"sequence length N={n} exceeds context limit {self.cfg.context}")

    def _lm(self, X: torch.Tensor, past=None, start: int = 0):
        X = X + self.pos_emb[start:start + X.shape[1]]
        new_past = []
        for i, blk in enumerate(self.blocks):
            X, kv = blk(X, None if past is None else past[i])
            new_past.append(kv)
        return ops.layernorm(X, self.ln_g, self.ln_b), new_past

    def hidden(self, images, ids) -> torch.Tensor:
        """Final hidden states ``Z`` of shape ``(B, N_v + N_t, D)``."""
        V = self.encode_image(images)
        ids = torch.as_tensor(np.asarray(ids) if not isinstance(ids, torch.Tensor) else ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[0] != V.shape[0]:
            raise ShapeError(f"{V.shape[0]} images but {ids.shape[0]} token rows")
        self._check_length(V.shape[1] + ids.shape[1])
        X = torch.cat([V, ops.embedding_lookup(ids, self.tok_emb)], dim=1)
        Z, _ = self._lm(X)
        return Z

    def forward(self, images, ids) -> torch.Tensor:
        """Logits ``(B, N_v + N_t, M)``; a single unbatched input gives ``(N, M)``."""
        single = np.ndim(ids) == 1 if not isinstance(ids, torch.Tensor) else ids.dim() == 1
        Y = ops.linear(self.hidden(images, ids), self.logit)
        return Y[0] if single else Y

    # -- incremental decoding -----------------------------------------------
    @torch.no_grad()
    def start(self, image) -> DecodeState:
        V = self.encode_image(image)[:1]
        Z, past = self._lm(V)
        return DecodeState(past, Z[0], [], V.shape[1])

    @torch.no_grad()
    def extend(self, state: DecodeState, ids) -> DecodeState:
        ids = [int(i) for i in ids]
        if not ids:
            return state
        n_before = state.n_image + len(state.text_ids)
        self._check_length(n_before + len(ids))
        T = ops.embedding_lookup(torch.tensor([ids]), self.tok_emb)
        Z, past = self._lm(T, state.past, start=n_before)
        return DecodeState(past, torch.cat([state.hidden, Z[0]]), state.text_ids + ids, state.n_image)

    def logits_at(self, hidden_rows: torch.Tensor) -> torch.Tensor:
        return ops.linear(hidden_rows, self.logit)

    # -- persistence -----------------------------------------------------------
    def save(self, path, extra: dict | None = None, meta: dict | None = None):
        tensors = dict(self.named_parameters())
        tensors.update(extra or {})
        return save_checkpoint(path, tensors, {"model": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "ModelBundle":
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model"]), dtype=dtype)
        model.load_tensors(tensors)
        return model

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        with torch.no_grad():
            for n, p in params.items():
                if tuple(tensors[n].shape) != tuple(p.shape):
                    raise ShapeError(f"{n}: checkpoint shape {tuple(tensors[n].shape)} vs model {tuple(p.shape)}")
                p.copy_(tensors[n].to(p.dtype))


def is_adapter(name: str) -> bool:
    return "_adapter_" in name


def set_finetune_mode(bundle: ModelBundle, mode: str) -> ModelBundle:
    """Select which parameters train.

    frozen: projection and logit head. adapters: those plus every adapter.
    full: everything. pretrain: projection only.
    """
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"unknown finetune mode {mode!r}; choose from {FINETUNE_MODES}")
    for name, p in bundle.named_parameters():
        if mode == "full":
            on = True
        elif mode == "pretrain":
            on = name == "proj"
        else:
            on = name in ("proj", "logit") or (mode == "adapters" and is_adapter(name))
        p.requires_grad_(on)
    bundle.cfg.finetune_mode = mode
    return bundle


def trainable_parameters(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    return {n: p for n, p in bundle.named_parameters() if p.requires_grad}


def count_trainable(bundle: ModelBundle) -> int:
    return sum(p.numel() for p in trainable_parameters(bundle).values())
