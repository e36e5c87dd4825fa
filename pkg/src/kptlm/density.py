"""Sampled keypoint distributions: repeated decoding, KDE on a grid, and a Gaussian baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .decoding import Strategy, generate_answer, is_stochastic, strategy_to_dict
from .errors import ConfigError, ShapeError, ZeroVarianceSamplerError
from .tokenizer import Vocabulary

MIN_BANDWIDTH = 1e-3


@dataclass
class SampleSet:
    points: np.ndarray  # (S, 2) in the unit square
    strategy: dict
    seed: int

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensityGrid:
    """Density values on a ``G x G`` grid; row r, column c covers ``y in [r/G, (r+1)/G)``, ``x in [c/G, (c+1)/G)``."""

    values: np.ndarray
    raw_mass: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_area(self) -> float:
        return 1.0 / self.resolution ** 2

    def masses(self) -> np.ndarray:
        return self.values * self.cell_area

    def integral(self) -> float:
        return float(self.masses().sum())

    def centers(self) -> np.ndarray:
        return (np.arange(self.resolution) + 0.5) / self.resolution

    def mode(self) -> tuple[float, float]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        cs = self.centers()
        return float(cs[c]), float(cs[r])

    def to_csv(self, path: str | Path) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.9g")

    def to_pgm(self, path: str | Path) -> None:
        """8-bit binary heatmap, scaled so the maximum is white."""
        top = self.values.max()
        img = np.zeros_like(self.values) if top <= 0 else self.values / top
        data = np.round(img * 255).astype(np.uint8)
        g = self.resolution
        with open(path, "wb") as f:
            f.write(f"P5\n{g} {g}\n255\n".encode("ascii"))
            f.write(data.tobytes())


def sample_keypoint(source, prompt: Sequence[int], strategy: Strategy, count: int, seed: int,
                    vocab: Vocabulary) -> SampleSet:
    """``count`` independent constrained generations; draw i uses the rng stream ``(seed, i)``."""
    if not is_stochastic(strategy):
        raise ZeroVarianceSamplerError(
            f"{type(strategy).__name__} decoding is deterministic; density sampling needs a stochastic strategy")
    if count < 0:
        raise ConfigError(f"sample count must be >= 0, got {count}")
    pts = np.zeros((count, 2))
    for i in range(count):
        ans = generate_answer(source, prompt, strategy, vocab, np.random.default_rng([seed, i]), constrained=True)
        pts[i] = ans.x, ans.y
    return SampleSet(pts, strategy_to_dict(strategy), seed)


def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Per-axis ``S^(-1/6) * std``, floored at ``MIN_BANDWIDTH``."""
    s = len(points)
    sd = np.std(points, axis=0, ddof=1)
    return np.maximum(s ** (-1.0 / 6.0) * sd, MIN_BANDWIDTH)


def _cell_mass(centers: np.ndarray, h, g: int) -> np.ndarray:
    """``(n, g)`` Gaussian mass of each 1-D cell for each kernel center."""
    edges = np.arange(g + 1) / g
    cdf = ndtr((edges[None, :] - centers[:, None]) / np.asarray(h).reshape(-1, 1))
    return np.diff(cdf, axis=1)


def kde(points, resolution: int = 128, bandwidth: str | float | Sequence[float] = "scott",
        normalize: bool = True) -> DensityGrid:
    """Gaussian KDE integrated exactly over each grid cell.

    ``raw_mass`` records how much kernel mass fell inside the unit square;
    with ``normalize`` the grid is rescaled to integrate to 1 over the square.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = len(pts)
    if s == 0:
        raise ValueError("cannot estimate a density from zero samples")
    # a canonical order makes the sums, and so the grid, independent of sample order
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if isinstance(bandwidth, str):
        if bandwidth != "scott":
            raise ConfigError(f"unknown bandwidth rule {bandwidth!r}")
        if s < 2:
            raise ValueError("the data-driven bandwidth needs at least two samples")
        h = scott_bandwidth(pts)
    else:
        h = np.maximum(np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (2,)), MIN_BANDWIDTH)
    mx = _cell_mass(pts[:, 0], h[0], resolution)
    my = _cell_mass(pts[:, 1], h[1], resolution)
    mass = my.T @ mx / s
    raw = float(mass.sum())
    if normalize and raw > 0:
        mass = mass / raw
    return DensityGrid(mass * resolution ** 2, raw, {"bandwidth": [float(v) for v in h], "samples": s})


def gaussian_baseline(gt: tuple[float, float], sigma: float = 0.05, resolution: int = 128) -> DensityGrid:
    """Isotropic Gaussian at ``gt``, cut off at the unit square and not renormalized."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    mx = _cell_mass(np.array([gt[0]]), sigma, resolution)
    my = _cell_mass(np.array([gt[1]]), sigma, resolution)
    mass = my.T @ mx
    return DensityGrid(mass * resolution ** 2, float(mass.sum()), {"sigma": sigma, "gt": list(map(float, gt))})


def _mask_on_grid(mask: np.ndarray, g: int) -> np.ndarray:
    mask = np.asarray(mask, bool)
    centers = (np.arange(g) + 0.5) / g
    rows = np.minimum((centers * mask.shape[0]).astype(int), mask.shape[0] - 1)
    cols = np.minimum((centers * mask.shape[1]).astype(int), mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def grid_metrics(grid: DensityGrid, gt: tuple[float, float], mask: np.ndarray | None = None) -> dict:
    m = grid.masses()
    cs = grid.centers()
    dist = np.hypot(cs[None, :] - gt[0], cs[:, None] - gt[1])
    total = m.sum()
    mode = grid.mode()
    out = {
        "in_square_mass": float(total),
        "expected_distance": float((m * dist).sum() / total) if total > 0 else float("nan"),
        "mode": list(mode),
        "mode_distance": float(np.hypot(mode[0] - gt[0], mode[1] - gt[1])),
    }
    if mask is not None and np.asarray(mask).any():
        out["in_foreground_mass"] = float(m[_mask_on_grid(mask, grid.resolution)].sum())
    return out


def density_report(kde_grid: DensityGrid, gauss_grid: DensityGrid, gt: tuple[float, float],
                   foreground_mask: np.ndarray | None = None, header: dict | None = None) -> dict:
    if kde_grid.values.shape != gauss_grid.values.shape:
        raise ShapeError(f"grid resolutions differ: {kde_grid.values.shape} vs {gauss_grid.values.shape}")
    return {
        **(header or {}),
        "gt": [float(gt[0]), float(gt[1])],
        "resolution": kde_grid.resolution,
        "kde": {**grid_metrics(kde_grid, gt, foreground_mask), "raw_in_square_mass": kde_grid.raw_mass,
                **kde_grid.meta},
        "gaussian": {**grid_metrics(gauss_grid, gt, foreground_mask), **gauss_grid.meta},
    }


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
