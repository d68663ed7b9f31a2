"""Segmentation quality metrics and the per-batch JSON-lines log.

Counts are integers until the final division, so results match a
pixel-by-pixel counting oracle exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError
from .nn.params import Tensor


def _check_pair(pred_logits: Tensor, mask: Tensor) -> None:
    if pred_logits.shape != mask.shape:
        raise DimensionError(
            f"logits shape {pred_logits.shape} != mask shape {mask.shape}"
        )
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValidationError("mask must be binary (0 or 1)")


def pixel_accuracy(pred_logits: Tensor, mask: Tensor, threshold: float = 0.0) -> float:
    """(TP + TN) / total over every pixel in the batch."""
    _check_pair(pred_logits, mask)
    pred = pred_logits > threshold
    matches = int(np.count_nonzero(pred == (mask > 0.5)))
    return matches / mask.size


def jaccard_iou(pred_logits: Tensor, mask: Tensor, threshold: float = 0.0,
                per_image: bool = False) -> float:
    """Intersection over union of the positive class.

    Micro-aggregated over the batch by default (sum counts, then divide);
    per_image=True averages one IoU per batch element instead. An empty
    prediction against an empty mask counts as perfect agreement (1.0).
    """
    _check_pair(pred_logits, mask)
    pred = pred_logits > threshold
    truth = mask > 0.5
    if not per_image:
        inter = int(np.count_nonzero(pred & truth))
        union = int(np.count_nonzero(pred | truth))
        return 1.0 if union == 0 else inter / union
    values = []
    for i in range(pred.shape[0]):
        inter = int(np.count_nonzero(pred[i] & truth[i]))
        union = int(np.count_nonzero(pred[i] | truth[i]))
        values.append(1.0 if union == 0 else inter / union)
    return float(np.mean(values))


@dataclass
class BatchMetrics:
    """One training batch's runtime validation record."""

    epoch: int
    step: int
    sample_ids: list[int]
    loss: float
    pixel_accuracy: float
    iou: float
    timestamp: float

    def __post_init__(self) -> None:
        if not self.sample_ids:
            raise ValidationError("BatchMetrics requires at least one sample id")
        for name in ("pixel_accuracy", "iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")

    @classmethod
    def now(cls, epoch: int, step: int, sample_ids, loss: float,
            acc: float, iou: float) -> "BatchMetrics":
        return cls(epoch, step, [int(i) for i in sample_ids],
                   float(loss), float(acc), float(iou), time.time())

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "BatchMetrics":
        raw = json.loads(line)
        return cls(
            epoch=int(raw["epoch"]),
            step=int(raw["step"]),
            sample_ids=[int(i) for i in raw["sample_ids"]],
            loss=float(raw["loss"]),
            pixel_accuracy=float(raw["pixel_accuracy"]),
            iou=float(raw["iou"]),
            timestamp=float(raw["timestamp"]),
        )


def metrics_log_append(path: str | Path, record: BatchMetrics) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")


def metrics_log_read(path: str | Path) -> tuple[list[BatchMetrics], list[tuple[int, str]]]:
    """Parse a metrics log. Malformed lines are reported as (line_number,
    message) and skipped; everything else is still returned."""
    records: list[BatchMetrics] = []
    errors: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(BatchMetrics.from_json(line))
            except (ValueError, KeyError, TypeError, ValidationError) as exc:
                errors.append((lineno, str(exc)))
    return records, errors
