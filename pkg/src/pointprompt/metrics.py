"""Confusion matrices and mean intersection-over-union."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def confusion(pred, truth, k: int) -> np.ndarray:
    """``K x K`` counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise DataError(f"pred and truth must be equal-length vectors, got {pred.shape} and {truth.shape}")
    for arr, what in ((pred, "prediction"), (truth, "ground-truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{what} label out of range [0, {k})")
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from truth and prediction."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm: np.ndarray) -> tuple[float, np.ndarray]:
    ious = per_class_iou(cm)
    present = ~np.isnan(ious)
    if not present.any():
        raise DataError("mIoU undefined: no class occurs in truth or prediction")
    return float(ious[present].mean()), ious
