"""Grounding and grasping metrics, plus the parameter audit report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AuditError, InputError, MetricError

PREC_THRESHOLDS = (0.5, 0.7, 0.9)


def mask_counts(pred, gt) -> tuple[int, int]:
    """Exact (intersection, union) pixel counts of two binary masks."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def mask_iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; two empty masks count as a perfect match."""
    inter, union = mask_counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class SegmentationSummary:
    miou: float
    oiou: float
    prec: dict


def aggregate(ious: Sequence[float], intersections: Sequence[int], unions: Sequence[int],
              thresholds=PREC_THRESHOLDS) -> SegmentationSummary:
    """mIoU, oIoU and Prec@X (strictly greater than X) over a set of samples."""
    if len(ious) == 0:
        raise MetricError("cannot aggregate an empty sample set")
    if not (len(ious) == len(intersections) == len(unions)):
        raise MetricError("per-sample arrays differ in length")
    ious = np.asarray(ious, dtype=np.float64)
    total_u = int(sum(int(u) for u in unions))
    total_i = int(sum(int(i) for i in intersections))
    oiou = 1.0 if total_u == 0 else total_i / total_u
    prec = {float(t): float(np.count_nonzero(ious > t)) / len(ious) for t in thresholds}
    return SegmentationSummary(float(ious.mean()), float(oiou), prec)


def grounding_accuracy(pixel: tuple[int, int], target_mask) -> bool:
    """True iff the selected (x, y) pixel lies on the target's ground-truth mask."""
    x, y = pixel
    target_mask = np.asarray(target_mask, dtype=bool)
    h, w = target_mask.shape
    if not (0 <= x < w and 0 <= y < h):
        return False
    return bool(target_mask[y, x])


def rate(outcomes: Sequence[bool]) -> float:
    if len(outcomes) == 0:
        raise MetricError("no outcomes to average")
    return sum(bool(o) for o in outcomes) / len(outcomes)


@dataclass
class ParamReport:
    tunable: int
    frozen: int
    ratio_percent: float

    def __str__(self):
        return (f"tunable parameters: {self.tunable:,}\n"
                f"frozen backbone parameters: {self.frozen:,}\n"
                f"tunable / frozen: {self.ratio_percent:.2f}%")


def param_report(registry) -> ParamReport:
    if not registry.frozen and not registry.tunable:
        raise AuditError("empty parameter registry")
    return ParamReport(registry.tunable_count, registry.frozen_count, registry.ratio())


@dataclass
class MetricsReport:
    task: str
    samples: int
    miou: Optional[float] = None
    oiou: Optional[float] = None
    prec_50: Optional[float] = None
    prec_70: Optional[float] = None
    prec_90: Optional[float] = None
    j_at_1: Optional[float] = None
    j_at_any: Optional[float] = None
    grounding_accuracy: Optional[float] = None
    grasp_success: Optional[float] = None
    tunable_params: Optional[int] = None
    frozen_params: Optional[int] = None
    param_ratio_percent: Optional[float] = None

    def __post_init__(self):
        for name in ("miou", "oiou", "prec_50", "prec_70", "prec_90", "j_at_1", "j_at_any",
                     "grounding_accuracy", "grasp_success"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        precs = [p for p in (self.prec_50, self.prec_70, self.prec_90) if p is not None]
        if any(a < b for a, b in zip(precs, precs[1:])):
            raise MetricError("Prec@X must be non-increasing in X")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = []
        for k, v in self.to_dict().items():
            if v is None:
                continue
            if isinstance(v, float) and k not in ("param_ratio_percent",):
                v = f"{100 * v:.2f}%"
            elif isinstance(v, float):
                v = f"{v:.2f}%"
            rows.append((k, str(v)))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
