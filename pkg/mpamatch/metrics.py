"""
Segmentation metrics from an accumulated confusion matrix.

Rows are ground truth and columns are predictions. mIoU, mDice and mCPA are macro
averages over the classes present in the ground truth; mCPA is the mean per-class recall.
"""

import json
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch

from mpamatch.exceptions import ShapeError, ValidationError
from mpamatch.models import ClassMetrics, MetricReport


def _as_numpy(mask: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(np.int64, copy=False)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


class ConfusionMatrix:
    """C x C pixel counts; accumulation is single-writer, merging is by addition."""

    def __init__(self, num_classes: int, class_names: Sequence[str] | None = None) -> None:
        if num_classes < 1:
            raise ValidationError(f"num_classes must be positive, got {num_classes}")
        if class_names is not None and len(class_names) != num_classes:
            raise ValidationError(f"{len(class_names)} class names for {num_classes} classes")
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, prediction: torch.Tensor | np.ndarray, truth: torch.Tensor | np.ndarray) -> "ConfusionMatrix":
        """
        Add cm[g][p] += number of pixels with truth g predicted as p.

        Raises:
            ShapeError: If the masks differ in shape
            ValidationError: If any value lies outside [0, C)
        """
        pred, gt = _as_numpy(prediction), _as_numpy(truth)
        if pred.shape != gt.shape:
            raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ")
        for name, values in (("prediction", pred), ("ground truth", gt)):
            if values.size and (values.min() < 0 or values.max() >= self.num_classes):
                raise ValidationError(
                    f"{name} values must lie in [0, {self.num_classes}), got [{values.min()}, {values.max()}]"
                )
        flat = gt.ravel() * self.num_classes + pred.ravel()
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(f"Cannot merge {other.num_classes}-class matrix into {self.num_classes}-class matrix")
        merged = ConfusionMatrix(self.num_classes, self.class_names)
        merged.counts = self.counts + other.counts
        return merged

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)

    @classmethod
    def from_counts(cls, counts: Sequence[Sequence[int]] | np.ndarray, class_names: Sequence[str] | None = None) -> "ConfusionMatrix":
        array = np.asarray(counts, dtype=np.int64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ShapeError(f"Confusion matrix must be square, got {array.shape}")
        if (array < 0).any():
            raise ValidationError("Confusion matrix counts must be non-negative")
        cm = cls(array.shape[0], class_names)
        cm.counts = array.copy()
        return cm

    def summarize(self, include_background: bool = True) -> MetricReport:
        """
        Per-class IoU, Dice and CPA and their macro averages.

        Classes absent from the ground truth are reported but excluded from the averages;
        include_background=False also excludes class 0.

        Raises:
            ValidationError: If the matrix is empty or no class is left to average
        """
        if self.total == 0:
            raise ValidationError("Cannot summarize an empty confusion matrix")
        cm = self.counts.astype(np.float64)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp

        rows: list[ClassMetrics] = []
        absent: list[int] = []
        for c in range(self.num_classes):
            present = cm[c].sum() > 0
            if not present:
                absent.append(c)
            rows.append(
                ClassMetrics(
                    index=c,
                    name=self.class_names[c],
                    iou=_ratio(tp[c], tp[c] + fp[c] + fn[c]),
                    dice=_ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]),
                    cpa=_ratio(tp[c], tp[c] + fn[c]),
                    present=bool(present),
                )
            )

        scored = [r for r in rows if r.present and (include_background or r.index != 0)]
        if not scored:
            raise ValidationError("No ground-truth class left to average")
        note = None
        if absent:
            names = ", ".join(self.class_names[c] for c in absent)
            note = f"absent from ground truth and excluded from averages: {names}"
        return MetricReport(
            miou=float(np.mean([r.iou for r in scored])),
            mdice=float(np.mean([r.dice for r in scored])),
            mcpa=float(np.mean([r.cpa for r in scored])),
            per_class=rows,
            include_background=include_background,
            absent_classes=absent,
            pixels=self.total,
            note=note,
        )


def write_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.model_dump(mode="json"), indent=2), encoding="utf-8")
