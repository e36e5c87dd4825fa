"""Sampling strategies, and turning repeated samples into a density map."""

import numpy as np

from kptlm.decoding import Contrastive, Greedy, Nucleus, Temperature, TopK, transformed_distribution
from kptlm.density import density_report, gaussian_baseline, kde

logits = np.log([0.4, 0.3, 0.2, 0.1])
for s in (Greedy(), Temperature(0.6), Temperature(2.0), TopK(2), Nucleus(0.8)):
    print(f"{type(s).__name__:12s}", np.round(transformed_distribution(logits, s), 3))
# contrastive search needs hidden states, so it has no fixed distribution
print(Contrastive(alpha=0.6, k=4))

# a keypoint on the left edge of an object that fills the left half of the image
gt = (0.01, 0.5)
mask = np.zeros((64, 64), bool)
mask[:, :32] = True

# pretend the model sampled 256 answers hugging the edge
rng = np.random.default_rng(0)
pts = np.column_stack([rng.uniform(0.0, 0.06, 256), rng.normal(0.5, 0.04, 256)])
grid = kde(pts, resolution=128)
base = gaussian_baseline(gt, sigma=0.05, resolution=128)
rep = density_report(grid, base, gt, mask)

print("KDE in-square mass     ", round(rep["kde"]["in_square_mass"], 3))
print("KDE raw in-square mass ", round(rep["kde"]["raw_in_square_mass"], 3))  # before renormalizing
print("Gaussian in-square mass", round(rep["gaussian"]["in_square_mass"], 3))  # about half falls off the edge
print("foreground mass, KDE vs Gaussian",
      round(rep["kde"]["in_foreground_mass"], 3), round(rep["gaussian"]["in_foreground_mass"], 3))
print("KDE mode", rep["kde"]["mode"], "bandwidth", np.round(rep["kde"]["bandwidth"], 4))

grid.to_pgm("/tmp/edge_kde.pgm")
base.to_pgm("/tmp/edge_gaussian.pgm")
