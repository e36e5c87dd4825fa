"""Train a toy model on synthetic shapes for a minute and look at what it predicts.

Expect rough guesses: the point is the plumbing, not the accuracy.
"""

import numpy as np
import torch

from kptlm.data import generate_synthetic
from kptlm.decoding import Temperature, infer_keypoints
from kptlm.evaluation import evaluate, format_table
from kptlm.instructions import PromptStyle
from kptlm.model import ModelBundle, ModelConfig, count_trainable, set_finetune_mode
from kptlm.tokenizer import Vocabulary
from kptlm.training import TrainConfig, train

torch.manual_seed(0)
ds = generate_synthetic(n_categories=5, images_per_category=30, seed=0, image_size=32, n_test=1)
print(ds.splits)

vocab = Vocabulary()
model = ModelBundle(ModelConfig(image_size=32, C=64, D=64, enc_depth=1, lm_depth=2), seed=0)
for mode in ("frozen", "adapters", "full"):
    print(mode, count_trainable(set_finetune_mode(model, mode)), "trainable parameters")

cfg = TrainConfig(lr=1e-3, epochs=3, batch=8, accumulation=1, k=4, schedule="cosine",
                  prompt={"use_description": False})
state = train(model, cfg, ds.subset("train"), ds.registry, vocab)
print("loss per epoch", np.round(state.epoch_losses, 3))

# held-out category, one keypoint per prompt
style = PromptStyle(use_description=False)
result = evaluate(model, ds.subset("test"), ds.registry, vocab, style=style)
print(format_table(result.report))

# cumulative mode keeps earlier answers in the context
s = ds.subset("test")[0]
for p in infer_keypoints(model, s.image, ds.registry[s.category], vocab, "cumulative", style=style):
    print(f"{p.name:22s} ({p.x:.3f}, {p.y:.3f})  context {p.context_length}")
print("ground truth", np.round(s.keypoints[:, :2], 3).tolist())

# sampling instead of greedy
rng = np.random.default_rng(1)
p = infer_keypoints(model, s.image, ds.registry[s.category][:1], vocab, strategy=Temperature(0.6), style=style, rng=rng)
print("sampled", p[0].name, p[0].x, p[0].y)
