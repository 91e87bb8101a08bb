"""Segmentation quality measures over binary masks.

Region similarity J is mask IoU. Contour accuracy F is the boundary
F-measure: boundary pixels of one mask count as matched when a boundary
pixel of the other lies within a tolerance radius, implemented by dilating
the opposite boundary with a disk. The radius follows the usual video
benchmark convention, 0.008 of the image diagonal, rounded up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def _as_bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def intersection_union(pred, gt) -> tuple[int, int]:
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int(np.logical_and(pred, gt).sum()), int(np.logical_or(pred, gt).sum())


def region_similarity(pred, gt) -> float:
    """Mask IoU; two empty masks agree perfectly (1.0)."""
    inter, union = intersection_union(pred, gt)
    if union == 0:
        return 1.0
    return inter / union


def mask_boundary(mask) -> np.ndarray:
    """Pixels of the mask with a 4-neighbor (or the image border) outside it."""
    mask = _as_bool(mask)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return mask & ~eroded


def boundary_tolerance(height: int, width: int) -> int:
    return int(np.ceil(0.008 * np.hypot(height, width)))


def _disk(radius: int) -> np.ndarray:
    if radius < 1:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius ** 2


def contour_accuracy(pred, gt) -> float:
    """Boundary F-measure with dilation-based matching.

    Both boundaries empty -> 1.0; exactly one empty -> 0.0.
    """
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pb, gb = mask_boundary(pred), mask_boundary(gt)
    np_, ng = int(pb.sum()), int(gb.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    disk = _disk(boundary_tolerance(*pred.shape))
    precision = (pb & ndimage.binary_dilation(gb, structure=disk)).sum() / np_
    recall = (gb & ndimage.binary_dilation(pb, structure=disk)).sum() / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def j_and_f(js, fs) -> tuple[float, float, float]:
    """Mean J, mean F, and their average."""
    js, fs = list(js), list(fs)
    if not js or not fs:
        raise ContractError("need at least one J and one F value")
    j, f = float(np.mean(js)), float(np.mean(fs))
    return j, f, (j + f) / 2


def precision_at_k(ious, k: float) -> float:
    """Fraction of samples whose IoU strictly exceeds k."""
    ious = list(ious)
    if not ious:
        raise ContractError("precision over an empty sample list")
    return sum(1 for v in ious if v > k) / len(ious)


def map_over_thresholds(ious) -> float:
    """Mean of precision_at_k over thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([precision_at_k(ious, k) for k in MAP_THRESHOLDS]))


def overall_and_mean_iou(intersections, unions) -> tuple[float, float]:
    """(sum I / sum U, mean of per-sample I/U).

    A sample with an empty union counts as IoU 1.0 toward the mean and is
    left out of the overall sums; all-empty input yields (1.0, 1.0).
    """
    intersections, unions = list(intersections), list(unions)
    if len(intersections) != len(unions):
        raise ContractError("intersection/union lists differ in length")
    if not unions:
        raise ContractError("no samples")
    per = [i / u if u > 0 else 1.0 for i, u in zip(intersections, unions)]
    total_u = sum(unions)
    overall = sum(intersections) / total_u if total_u > 0 else 1.0
    return overall, float(np.mean(per))


@dataclass
class MetricsReport:
    j: float
    f: float
    jf: float
    precision_at: dict = field(default_factory=dict)
    overall_iou: float = 0.0
    mean_iou: float = 0.0
    map: float = 0.0

    def to_dict(self) -> dict:
        d = {"J": self.j, "F": self.f, "J&F": self.jf,
             "overall_iou": self.overall_iou, "mean_iou": self.mean_iou,
             "mAP": self.map}
        for k, v in sorted(self.precision_at.items()):
            d[f"P@{k}"] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(self.to_dict().keys())

    def csv_row(self) -> str:
        return ",".join(f"{v:.6f}" for v in self.to_dict().values())


def summarize(per_sample_j, per_sample_f, intersections, unions) -> MetricsReport:
    """Aggregate per-sample values into one report."""
    j, f, jf = j_and_f(per_sample_j, per_sample_f)
    overall, mean = overall_and_mean_iou(intersections, unions)
    ious = [i / u if u > 0 else 1.0 for i, u in zip(intersections, unions)]
    return MetricsReport(
        j=j, f=f, jf=jf,
        precision_at={k: precision_at_k(ious, k) for k in PRECISION_THRESHOLDS},
        overall_iou=overall, mean_iou=mean, map=map_over_thresholds(ious),
    )
