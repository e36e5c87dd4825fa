from .checkpoint import FORMAT_VERSION, load_checkpoint, read_header, save_checkpoint
from .ops import (
    AdapterPair,
    causal_attention,
    embedding_lookup,
    gelu,
    layernorm,
    linear,
    log_softmax,
    mlp_block,
    softmax,
    softmax_cross_entropy,
)
from .optim import AdamWState, adamw_step, clip_grad_norm

__all__ = [
    "AdamWState", "AdapterPair", "FORMAT_VERSION", "adamw_step", "causal_attention", "clip_grad_norm",
    "embedding_lookup", "gelu", "layernorm", "linear", "load_checkpoint", "log_softmax", "mlp_block",
    "read_header", "save_checkpoint", "softmax", "softmax_cross_entropy",
]
