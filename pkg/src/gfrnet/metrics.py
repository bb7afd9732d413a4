"""Confusion-matrix segmentation metrics and the stage-wise evaluation table."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .arch import forward, labels_from_scores
from .data import VGG_MEAN, VGG_STD, prepare_batch
from .supervision import IGNORE_INDEX


class ConfusionMatrix:
    """``counts[gt][pred]`` over non-ignored pixels (int64)."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred, gt, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        keep = gt != ignore_index
        g, p = gt[keep], pred[keep]
        C = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= C or p.min() < 0 or p.max() >= C):
            raise ValueError(f"label outside [0, {C})")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    per_class_iou: np.ndarray  # NaN for classes absent from both gt and pred
    mean_iou: float
    pixel_acc: float
    mean_acc: float


def metrics(cm: ConfusionMatrix) -> Metrics:
    c = cm.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
        gt_total = tp + fn
        acc = np.where(gt_total > 0, tp / gt_total, np.nan)
    return Metrics(iou, float(np.nanmean(iou)), float(tp.sum() / c.sum()), float(np.nanmean(acc)))


def mean_of(values) -> float:
    """Unweighted mean of a per-class row, e.g. a table of class IoUs in percent."""
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def stage_names(num_stages: int) -> list:
    return ["PmG"] + [f"PmRU{k}" for k in range(1, num_stages)]


@dataclass
class StageRow:
    stage: str
    mean_iou: float
    pixel_acc: float
    confusion: ConfusionMatrix


def stage_report(params, config, samples, mean=VGG_MEAN, std=VGG_STD) -> list:
    """Evaluate every supervised map at full resolution (batch-norm in infer mode).

    Images get the same normalization as in training.
    """
    cms = [ConfusionMatrix(config.num_classes) for _ in range(config.num_stages)]
    params.set_mode("infer")
    try:
        for s in samples:
            image, _ = prepare_batch([s], mean, std)
            out = forward(image, params, config)
            h, w = s.labels.shape
            for cm, m in zip(cms, out.maps):
                cm.accumulate(labels_from_scores(m.value, h, w)[0], s.labels)
    finally:
        params.set_mode("train")
    rows = []
    for name, cm in zip(stage_names(config.num_stages), cms):
        m = metrics(cm)
        rows.append(StageRow(name, m.mean_iou, m.pixel_acc, cm))
    return rows


def write_stage_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "mean_iou", "pixel_acc"])
        for r in rows:
            w.writerow([r.stage, f"{r.mean_iou:.6f}", f"{r.pixel_acc:.6f}"])


def write_class_csv(path, m: Metrics, names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "name", "iou"])
        for c, name in enumerate(names):
            iou = m.per_class_iou[c]
            w.writerow([c, name, "" if np.isnan(iou) else f"{iou:.6f}"])
