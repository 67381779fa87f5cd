"""Binary overlap metrics and per-plane aggregation of slice records."""

from dataclasses import dataclass

import numpy as np

REPORT_DECIMALS = 4


@dataclass(frozen=True)
class MetricPair:
    dsc: float
    iou: float


@dataclass(frozen=True)
class SliceMetrics:
    """Overlap metrics for one evaluated slice."""

    patient_id: str
    plane: str
    domain: str
    slice_index: int
    dsc: float
    iou: float


def _as_binary(a) -> np.ndarray:
    arr = np.asarray(a)
    out = arr.astype(bool)
    if not np.array_equal(arr, out.astype(arr.dtype)):
        raise ValueError("mask values must be in {0, 1}")
    return out


def _check_shapes(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_binary(a), _as_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1.0."""
    a, b = _check_shapes(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def dsc(a, b) -> float:
    """Dice similarity coefficient of two binary masks; empty vs empty is 1.0."""
    a, b = _check_shapes(a, b)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2 * int(np.count_nonzero(a & b)) / total


def metric_pair(prediction, truth) -> MetricPair:
    return MetricPair(dsc=dsc(prediction, truth), iou=iou(prediction, truth))


def aggregate(records: list[SliceMetrics], group_by: str = "plane") -> dict[str, MetricPair]:
    """Unweighted per-group mean of slice DSC/IoU, rounded for reporting.

    Only grouping by plane is meaningful for the ratio tables, but any
    record attribute works.
    """
    if not records:
        raise ValueError("cannot aggregate zero records")
    groups: dict[str, list[SliceMetrics]] = {}
    for rec in records:
        groups.setdefault(getattr(rec, group_by), []).append(rec)
    return {
        key: MetricPair(
            dsc=round(float(np.mean([r.dsc for r in recs])), REPORT_DECIMALS),
            iou=round(float(np.mean([r.iou for r in recs])), REPORT_DECIMALS),
        )
        for key, recs in sorted(groups.items())
    }
