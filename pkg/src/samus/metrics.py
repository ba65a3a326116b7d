"""Segmentation metrics on binary masks.

Dice is reported on a 0..100 scale. Hausdorff distances are symmetric
Euclidean distances in pixels between the two foreground point sets,
computed with a KD-tree; an empty mask has no point set, so asking for its
distance is an error the caller must handle (evaluation skips those pairs
and reports how many were skipped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MetricError(ValueError):
    pass


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MetricError(f"{name} must be 2d, got shape {arr.shape}")
    return arr.astype(bool)


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """2 |P & G| / (|P| + |G|) on a 0..100 scale; two empty masks agree at 100."""
    pred = _as_bool(pred, "pred")
    target = _as_bool(target, "target")
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {target.shape}")
    denom = int(pred.sum()) + int(target.sum())
    if denom == 0:
        return 100.0
    inter = int(np.logical_and(pred, target).sum())
    return 100.0 * 2.0 * inter / denom


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst)
    return tree.query(src)[0]


def _point_sets(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = _as_bool(pred, "pred")
    target = _as_bool(target, "target")
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {target.shape}")
    pts_p = np.argwhere(pred).astype(np.float64)
    pts_t = np.argwhere(target).astype(np.float64)
    if len(pts_p) == 0 or len(pts_t) == 0:
        raise MetricError("hausdorff distance is undefined for an empty mask")
    return pts_p, pts_t


def hausdorff_distance(pred: np.ndarray, target: np.ndarray) -> float:
    """max over both directed max-min Euclidean distances, in pixels."""
    pts_p, pts_t = _point_sets(pred, target)
    forward = _directed_distances(pts_p, pts_t).max()
    backward = _directed_distances(pts_t, pts_p).max()
    return float(max(forward, backward))


def hausdorff_95(pred: np.ndarray, target: np.ndarray) -> float:
    """95th-percentile variant, less sensitive to single stray pixels."""
    pts_p, pts_t = _point_sets(pred, target)
    forward = np.percentile(_directed_distances(pts_p, pts_t), 95)
    backward = np.percentile(_directed_distances(pts_t, pts_p), 95)
    return float(max(forward, backward))


@dataclass
class MetricReport:
    """Per-dataset aggregate. Hausdorff lists hold only defined pairs."""

    dataset: str
    dice_scores: list[float] = field(default_factory=list)
    hausdorff_distances: list[float] = field(default_factory=list)
    skipped_hausdorff: int = 0
    skipped_prompts: int = 0

    def add(self, pred: np.ndarray, target: np.ndarray, use_hd95: bool = False) -> None:
        self.dice_scores.append(dice_score(pred, target))
        try:
            hd = hausdorff_95(pred, target) if use_hd95 else hausdorff_distance(pred, target)
        except MetricError:
            self.skipped_hausdorff += 1
            return
        self.hausdorff_distances.append(hd)

    @property
    def count(self) -> int:
        return len(self.dice_scores)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice_scores)) if self.dice_scores else math.nan

    @property
    def mean_hausdorff(self) -> float:
        if not self.hausdorff_distances:
            return math.nan
        return float(np.mean(self.hausdorff_distances))
