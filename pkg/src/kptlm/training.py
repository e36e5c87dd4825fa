"""Instruction tuning: epoch construction, masked-loss training and projection pretraining."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import PoseSample
from .errors import ConfigError, TrainingError
from .instructions import (
    PromptKind,
    PromptStyle,
    Registry,
    RenderedConversation,
    dynamic_round_pairing,
    fixed_round_pairing,
    make_conversation,
    render_conversation,
)
from .model import ModelBundle, set_finetune_mode, trainable_parameters
from .nn import AdamWState, adamw_step, clip_grad_norm, softmax_cross_entropy
from .tokenizer import Vocabulary

STRATEGIES = ("fixed", "dynamic", "locllm_style")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 12
    warmup: float = 0.03
    accumulation: int = 32
    batch: int = 1
    k: int = 4
    strategy: str = "fixed"
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    schedule: str = "constant"
    round_range: tuple[int, int] = (1, 8)
    device_count: int = 1
    max_steps: int | None = None
    prompt: dict = field(default_factory=dict)

    def __post_init__(self):
        self.round_range = tuple(int(v) for v in self.round_range)
        if not 0 <= self.warmup < 1:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup}")
        if self.accumulation < 1 or self.batch < 1 or self.device_count < 1:
            raise ConfigError("accumulation, batch and device_count must all be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown training strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown lr schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.k < 1 or self.epochs < 1 or not self.lr > 0:
            raise ConfigError("k and epochs must be >= 1 and lr > 0")
        PromptStyle.from_dict(self.prompt)

    @property
    def style(self) -> PromptStyle:
        return PromptStyle.from_dict(self.prompt)

    @property
    def effective_batch(self) -> int:
        return self.accumulation * self.device_count * self.batch

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["round_range"] = list(self.round_range)
        return d


@dataclass
class Example:
    image_id: int
    image: np.ndarray
    convo: RenderedConversation


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    optimizer: AdamWState = field(default_factory=AdamWState)
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then constant or cosine decay to 0."""
    warm = math.ceil(cfg.warmup * total_steps)
    if step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(total_steps - warm, 1)
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * min(step - warm, span) / span))


def _groups(n: int, strategy: str, k: int, rng: np.random.Generator, round_range) -> list[list[int]]:
    idx = list(range(n))
    if strategy == "fixed":
        return fixed_round_pairing(idx, k, rng)
    if strategy == "dynamic":
        return dynamic_round_pairing(idx, rng, round_range)
    return [sorted(int(i) for i in rng.choice(n, size=min(k, n), replace=False))]


def build_epoch(samples: Sequence[PoseSample], registry: Registry, vocab: Vocabulary, strategy: str = "fixed",
                k: int = 4, rng: np.random.Generator | None = None, style: PromptStyle = PromptStyle(),
                round_range=(1, 8), shuffle: bool = True) -> list[Example]:
    """Render one epoch of conversations.

    fixed and dynamic cover every visible keypoint of every image; locllm_style
    draws a single k-subset per image.
    """
    if not samples:
        raise ValueError("cannot build an epoch from an empty dataset")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown training strategy {strategy!r}; choose from {STRATEGIES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for s in samples:
        specs = registry[s.category]
        vis = [int(i) for i in np.flatnonzero(s.visible)]
        if not vis:
            continue
        for group in _groups(len(vis), strategy, k, rng, round_range):
            kp = [vis[g] for g in group]
            conv = make_conversation(s.image_id, [specs[i] for i in kp],
                                     [tuple(float(v) for v in s.keypoints[i, :2]) for i in kp],
                                     style, rng, registry, category_specs=specs)
            out.append(Example(s.image_id, s.image, render_conversation(conv, vocab, style, specs)))
    if shuffle:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def batch_loss(model: ModelBundle, batch: Sequence[Example], pad_id: int = 0) -> torch.Tensor:
    """Masked next-token loss over the answer tokens of a padded micro-batch."""
    n = max(len(e.convo) for e in batch)
    ids = np.full((len(batch), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(batch), n), dtype=np.float64)
    for r, e in enumerate(batch):
        ids[r, : len(e.convo)] = e.convo.ids
        mask[r, : len(e.convo)] = e.convo.mask
    images = np.stack([e.image for e in batch])
    logits = model(images, torch.from_numpy(ids))
    n_img = logits.shape[1] - n
    # the token at text position j is predicted from the position just before it
    pred = logits[:, n_img - 1: n_img - 1 + n]
    return softmax_cross_entropy(pred, torch.from_numpy(ids), torch.from_numpy(mask).to(pred.dtype))


def _micro_batches(examples: list[Example], size: int) -> list[list[Example]]:
    return [examples[i:i + size] for i in range(0, len(examples), size)]


def train(model: ModelBundle, cfg: TrainConfig, samples: Sequence[PoseSample], registry: Registry,
          vocab: Vocabulary, out_dir: str | Path | None = None, style: PromptStyle | None = None,
          state: TrainState | None = None, checkpoint_prefix: str = "epoch") -> TrainState:
    """Train the currently trainable parameters of ``model``.

    Each optimizer step averages the gradients of ``accumulation`` micro-batches.
    With ``out_dir``, a checkpoint is written after every epoch and every step
    is appended to ``train_log.jsonl``.
    """
    style = style or cfg.style
    state = state or TrainState()
    params = trainable_parameters(model)
    if not params:
        raise ConfigError("model has no trainable parameters; set a finetune mode first")
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "train_log.jsonl", "w")

    rng_root = np.random.SeedSequence(cfg.seed)
    epoch_rngs = [np.random.default_rng(s) for s in rng_root.spawn(cfg.epochs)]
    # epochs are rendered up front so the schedule knows the step count (dynamic epochs vary in length)
    plans = [build_epoch(samples, registry, vocab, cfg.strategy, cfg.k, epoch_rngs[e], style, cfg.round_range)
             for e in range(cfg.epochs)]
    per_step = cfg.accumulation * cfg.batch
    total = sum(math.ceil(len(p) / per_step) for p in plans)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    model.train()
    try:
        for epoch, plan in enumerate(plans):
            if state.step >= total:
                break
            state.epoch = epoch
            micro = _micro_batches(plan, cfg.batch)
            epoch_sum, epoch_n = 0.0, 0
            for start in range(0, len(micro), cfg.accumulation):
                if state.step >= total:
                    break
                group = micro[start:start + cfg.accumulation]
                for p in params.values():
                    p.grad = None
                running = 0.0
                for mb in group:
                    loss = batch_loss(model, mb, vocab.pad)
                    if not torch.isfinite(loss):
                        ids = [e.image_id for e in mb]
                        raise TrainingError(f"non-finite loss at epoch {epoch} step {state.step} images {ids}")
                    (loss / len(group)).backward()
                    running += float(loss.detach()) / len(group)
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                if cfg.grad_clip:
                    clip_grad_norm(grads, cfg.grad_clip)
                lr = lr_at(state.step, total, cfg)
                adamw_step(params, grads, state.optimizer, lr, weight_decay=cfg.weight_decay)
                state.losses.append(running)
                epoch_sum += running
                epoch_n += 1
                if log is not None:
                    log.write(json.dumps({"step": state.step, "epoch": epoch, "lr": lr, "loss": running}) + "\n")
                state.step += 1
            state.epoch_losses.append(epoch_sum / max(epoch_n, 1))
            if out is not None:
                path = out / f"{checkpoint_prefix}_{epoch:03d}.ckpt"
                model.save(path, meta={"epoch": epoch, "step": state.step, "train": cfg.to_dict()})
                state.checkpoints.append(str(path))
    finally:
        if log is not None:
            log.close()
        for p in params.values():
            p.grad = None
        model.eval()
    return state


def pretrain_stage(model: ModelBundle, cfg: TrainConfig, samples: Sequence[PoseSample], registry: Registry,
                   vocab: Vocabulary, qa_style: str | PromptKind = PromptKind.DIRECT_QA_PRETRAIN,
                   out_dir: str | Path | None = None) -> ModelBundle:
    """Train only the projection on name-answering questions, then restore the finetune mode."""
    kind = PromptKind(qa_style)
    if kind not in (PromptKind.DIRECT_QA_PRETRAIN, PromptKind.STEP_BY_STEP_QA_PRETRAIN):
        raise ConfigError(f"pretraining needs a QA style, got {kind.value!r}")
    previous = model.cfg.finetune_mode
    set_finetune_mode(model, "pretrain")
    style = PromptStyle.from_dict({**cfg.prompt, "kind": kind})
    try:
        train(model, cfg, samples, registry, vocab, out_dir, style=style, checkpoint_prefix="pretrain")
    finally:
        set_finetune_mode(model, previous)
    return model
