"""Coordinates as digit tokens, and how a conversation is put together."""

import numpy as np

from kptlm.data import generate_synthetic
from kptlm.instructions import PromptStyle, fixed_round_pairing, dynamic_round_pairing, make_conversation, render_conversation
from kptlm.tokenizer import Vocabulary, encode_coords, parse_coords

vocab = Vocabulary()
print(len(vocab), "tokens")  # printable ASCII plus a handful of specials

# three digits per axis, truncated toward zero
print(encode_coords(0.12345, 0.5))     # [0.123, 0.500]
print(encode_coords(1.0, 0.9999))      # clamps to [0.999, 0.999]
print(parse_coords("[0.250, 0.750]"))  # (0.25, 0.75)

# pairing: 7 keypoints in rounds of 3, the last group padded by cycling
rng = np.random.default_rng(0)
print(fixed_round_pairing(list("abcdefg"), 3, rng))
print(dynamic_round_pairing(list("abcdefg"), rng, (1, 4)))

ds = generate_synthetic(4, 2, seed=0, image_size=32)
s = ds.samples[0]
specs = ds.registry[s.category]
style = PromptStyle(use_description=True)
targets = [tuple(map(float, p[:2])) for p in s.keypoints]
conv = make_conversation(s.image_id, specs, targets, style, rng)
rendered = render_conversation(conv, vocab, style, specs)
text = vocab.decode(rendered.ids)
print(text)

# the loss only sees coordinate characters
shown = [vocab.symbols[i] if m else "." for i, m in zip(rendered.ids, rendered.mask)]
print("".join(shown)[-60:])
