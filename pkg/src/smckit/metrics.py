"""Task metrics: accuracy, box and mask IoU, mean IoU and AP at an IoU threshold."""

from __future__ import annotations

import numpy as np

from smckit.errors import DimensionMismatch, InvalidInput


def _check(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if target.size == 0 or len(target) == 0:
        raise InvalidInput("empty target set")
    if pred.shape != target.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} vs target shape {target.shape}")
    return pred, target


def accuracy(pred_labels, labels) -> float:
    pred, target = _check(pred_labels, labels)
    return float((pred == target).mean())


def center_to_corners(boxes) -> np.ndarray:
    """(cx, cy, w, h) -> (x0, y0, x1, y1)."""
    b = np.asarray(boxes, dtype=np.float64)
    half = np.abs(b[..., 2:]) / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def box_iou(a, b) -> np.ndarray:
    """Element-wise IoU of corner-format boxes ``(x0, y0, x1, y1)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 4:
        raise DimensionMismatch(f"box shapes {a.shape} and {b.shape}")
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def mask_iou(pred, target) -> float:
    pred, target = _check(np.asarray(pred, bool), np.asarray(target, bool))
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def mean_iou(pred, target, num_classes: int = 2) -> float:
    """Class-mean IoU of integer label maps, each class accumulated over the whole set.

    Classes absent from both prediction and target are skipped.
    """
    pred, target = _check(pred, target)
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def average_precision(pred_boxes, true_boxes, threshold: float) -> float:
    """Fraction of predicted boxes whose IoU with their matched ground truth exceeds ``threshold``.

    Boxes are corner format and matched by index (one object per image).
    """
    pred, target = _check(pred_boxes, true_boxes)
    return float((box_iou(pred, target) > threshold).mean())


def metrics(predictions, targets, kind: str) -> dict[str, float]:
    """Dispatch on task kind: ``classification``, ``segmentation`` or ``detection``.

    Segmentation predictions and targets are binary masks; detection ones are
    corner-format boxes.
    """
    if kind == "classification":
        return {"accuracy": accuracy(predictions, targets)}
    if kind == "segmentation":
        p, t = _check(np.asarray(predictions, bool), np.asarray(targets, bool))
        return {"iou": mask_iou(p, t), "miou": mean_iou(p.astype(int), t.astype(int), 2)}
    if kind == "detection":
        p, t = _check(predictions, targets)
        return {
            "iou": float(box_iou(p, t).mean()),
            "ap50": average_precision(p, t, 0.5),
            "ap75": average_precision(p, t, 0.75),
        }
    raise InvalidInput(f"unknown metric kind {kind!r}")
