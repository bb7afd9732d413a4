"""Ground-truth pyramids, median-frequency class weights and stage-wise losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

IGNORE_INDEX = 255


def resize_gt(labels: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour downsampling of an (n, h, w) label map.

    Destination pixel ``d`` reads source index ``floor((d + 0.5) * scale)``
    along each axis. Labels (including the ignore value) are copied, never
    blended.
    """
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if target_h < 1 or target_w < 1 or h % target_h or w % target_w:
        raise ValueError(f"cannot resize labels {h}x{w} to {target_h}x{target_w}: not an integer ratio")
    sh, sw = h // target_h, w // target_w
    if sh != sw or sh & (sh - 1):
        raise ValueError(f"resize ratio {sh}x{sw} must be the same power of 2 on both axes")
    rows = np.floor((np.arange(target_h) + 0.5) * sh).astype(int)
    cols = np.floor((np.arange(target_w) + 0.5) * sw).astype(int)
    return labels[..., rows[:, None], cols[None, :]]


def pixel_counts(labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    labels = labels[labels != ignore_index]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    return np.bincount(labels, minlength=num_classes)


def class_weights(counts) -> np.ndarray:
    """Median-frequency balancing; classes with no pixels get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise ValueError("class_weights needs at least one non-zero pixel count")
    freq = counts / counts[present].sum()
    med = np.median(freq[present])
    out = np.zeros_like(freq)
    out[present] = med / freq[present]
    return out


@dataclass
class LossBreakdown:
    per_stage: list
    total: ad.Node
    stage_weights: list

    def values(self) -> list:
        return [float(l.value) for l in self.per_stage]


def stage_losses(outputs, labels, weights=None, stage_weights=None,
                 ignore_index: int = IGNORE_INDEX) -> LossBreakdown:
    """One weighted cross-entropy per supervised map plus their weighted total.

    ``outputs`` is a :class:`~gfrnet.arch.StageOutputs` (or any object with a
    ``maps`` list of score nodes, coarse first). Each map is compared against
    the ground truth resized to its own resolution.
    """
    maps = outputs.maps
    if stage_weights is None:
        stage_weights = [1.0] * len(maps)
    stage_weights = [float(s) for s in stage_weights]
    if len(stage_weights) != len(maps):
        raise ValueError(f"expected {len(maps)} stage weights, got {len(stage_weights)}")
    if any(s < 0 for s in stage_weights):
        raise ValueError("stage weights must be non-negative")
    per_stage = []
    for m in maps:
        gt = resize_gt(labels, *m.shape[2:])
        per_stage.append(ad.softmax_xent(m, gt, weights, ignore_index))
    total = ad.weighted_sum(per_stage, stage_weights)
    return LossBreakdown(per_stage, total, stage_weights)
