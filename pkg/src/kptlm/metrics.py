"""PCK and mPCK with bounding-box normalization in original-image pixels."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .data import PoseSample
from .errors import ConfigError, MissingPredictionError

PCK_THRESHOLDS = (0.05, 0.10, 0.15, 0.20, 0.25)
PCK_NORMS = ("bbox_long_side", "bbox_diagonal")


def bbox_normalizer(bbox, norm: str = "bbox_long_side") -> float:
    w, h = bbox[2], bbox[3]
    if norm == "bbox_long_side":
        return float(max(w, h))
    if norm == "bbox_diagonal":
        return float(np.hypot(w, h))
    raise ConfigError(f"unknown PCK normalizer {norm!r}; choose from {PCK_NORMS}")


def pck_arrays(pred_px: np.ndarray, gt_px: np.ndarray, normalizer, alpha: float,
               visible: np.ndarray | None = None, weights: np.ndarray | None = None) -> float:
    """Weighted fraction of visible points with ``|pred - gt| <= alpha * normalizer``."""
    d = np.linalg.norm(np.asarray(pred_px, float) - np.asarray(gt_px, float), axis=-1)
    hit = d <= alpha * np.broadcast_to(np.asarray(normalizer, float), d.shape)
    w = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, float), d.shape).copy()
    if visible is not None:
        w = w * np.asarray(visible, bool)
    total = w.sum()
    if total == 0:
        raise ValueError("no visible keypoints to score")
    return float((w * hit).sum() / total)


def normalized_errors(predictions: Mapping[int, np.ndarray], samples: Sequence[PoseSample],
                      norm: str = "bbox_long_side", weights: Mapping[int, float] | None = None):
    """Per visible keypoint: pixel distance over the bbox normalizer, plus its weight."""
    errs, ws = [], []
    for s in samples:
        if s.image_id not in predictions:
            raise MissingPredictionError(f"no prediction for image {s.image_id}")
        pred = np.asarray(predictions[s.image_id], dtype=np.float64)
        for k in np.flatnonzero(s.visible):
            if k >= len(pred) or not np.all(np.isfinite(pred[k])):
                raise MissingPredictionError(f"no prediction for image {s.image_id} keypoint {k}")
        vis = s.visible
        pp = s.crop.to_pixels(pred[: len(s.keypoints)][vis])
        gp = s.crop.to_pixels(s.keypoints[vis, :2])
        errs.append(np.linalg.norm(pp - gp, axis=1) / bbox_normalizer(s.bbox, norm))
        ws.append(np.full(int(vis.sum()), 1.0 if weights is None else float(weights.get(s.image_id, 0.0))))
    if not errs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(errs), np.concatenate(ws)


def pck(predictions: Mapping[int, np.ndarray], samples: Sequence[PoseSample], alpha: float = 0.2,
        norm: str = "bbox_long_side", weights: Mapping[int, float] | None = None) -> float:
    """PCK@alpha. ``predictions`` maps image id to a ``K x 2`` array of normalized points."""
    e, w = normalized_errors(predictions, samples, norm, weights)
    if w.sum() == 0:
        raise ValueError("no visible keypoints to score")
    return float((w * (e <= alpha)).sum() / w.sum())


def pck_curve(predictions, samples, thresholds=PCK_THRESHOLDS, norm="bbox_long_side", weights=None) -> dict[float, float]:
    e, w = normalized_errors(predictions, samples, norm, weights)
    if w.sum() == 0:
        raise ValueError("no visible keypoints to score")
    return {a: float((w * (e <= a)).sum() / w.sum()) for a in thresholds}


def mean_pck(values: Sequence[float]) -> float:
    if len(values) != len(PCK_THRESHOLDS):
        raise ValueError(f"expected {len(PCK_THRESHOLDS)} PCK values, got {len(values)}")
    return float(np.mean(values))


def mpck(predictions, samples, norm="bbox_long_side", weights=None) -> float:
    return mean_pck(list(pck_curve(predictions, samples, PCK_THRESHOLDS, norm, weights).values()))
