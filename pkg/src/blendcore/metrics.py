"""Mask IoU, aggregate evaluation, and the overlap-disagreement measurement."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .blender import BlendConfig, paste_mask
from .synthdata import Scene, overlap_pairs
from .trainer import ModelParams, instance_logits


@dataclass
class EvalReport:
    label: str
    ious: list[float]

    @property
    def n_instances(self) -> int:
        return len(self.ious)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else 0.0

    def frac_at(self, thr: float) -> float:
        return float(np.mean(np.asarray(self.ious) >= thr)) if self.ious else 0.0

    @property
    def frac50(self) -> float:
        return self.frac_at(0.5)

    @property
    def frac75(self) -> float:
        return self.frac_at(0.75)

    def row(self) -> list:
        return [self.label, f"{self.mean_iou:.6f}", f"{self.frac50:.6f}", f"{self.frac75:.6f}", self.n_instances]


REPORT_HEADER = ["config", "mean_iou", "frac50", "frac75", "n_instances"]


def write_reports(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


def write_per_instance(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "iou"])
        for i, v in enumerate(report.ious):
            w.writerow([i, f"{v:.6f}"])


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def predict_masks(params: ModelParams, scene: Scene, threshold: float = 0.5) -> list[np.ndarray]:
    logits = instance_logits(params, scene)
    h, w = scene.image.shape[2:]
    return [paste_mask(logits[d, 0], inst.box, h, w, threshold) for d, inst in enumerate(scene.instances)]


def evaluate(params: ModelParams, val: list[Scene], cfg: BlendConfig | None = None, label: str | None = None) -> EvalReport:
    cfg = cfg or params.cfg
    ious = []
    for scene in val:
        for pred, inst in zip(predict_masks(params, scene), scene.instances):
            ious.append(mask_iou(pred, inst.mask))
    return EvalReport(label or cfg.label, ious)


def _box_intersection(a, b, h, w) -> np.ndarray:
    region = np.zeros((h, w), dtype=bool)
    centers = np.arange(max(h, w)) + 0.5
    ys = (centers[:h] >= max(a.y1, b.y1)) & (centers[:h] < min(a.y2, b.y2))
    xs = (centers[:w] >= max(a.x1, b.x1)) & (centers[:w] < min(a.x2, b.x2))
    region[np.ix_(ys, xs)] = True
    return region


def contested_region(scene: Scene, i: int, j: int) -> np.ndarray:
    """Pixels inside both boxes that ground truth assigns to exactly one instance."""
    a, b = scene.instances[i], scene.instances[j]
    h, w = a.mask.shape
    return _box_intersection(a.box, b.box, h, w) & np.logical_xor(a.mask, b.mask)


def overlap_disagreement(params: ModelParams, scenes: list[Scene]) -> float:
    """Fraction of contested pixels on which the two predicted masks differ.

    Pooled over every overlapping pair of every scene.
    """
    differ = total = 0
    for scene in scenes:
        pairs = overlap_pairs(scene)
        if not pairs:
            continue
        preds = predict_masks(params, scene)
        for i, j in pairs:
            region = contested_region(scene, i, j)
            differ += int(np.logical_xor(preds[i], preds[j])[region].sum())
            total += int(region.sum())
    return differ / total if total else 0.0
