"""Sequence matching cost, its constituent losses, and the training objective.

There is exactly one referred object per clip, so matching reduces to an
argmin over the N predicted sequences of a per-frame cost, normalized by the
frame count. Frames where the object is invisible contribute only the class
term; their box and mask annotations are ignored.
"""

from __future__ import annotations

import torch

from .config import LossConfig
from .errors import ContractError, NumericError

EPS = 1e-8


class GroundTruth:
    """One referred object's per-frame annotations.

    visibility: [T] in {0,1}; boxes: [T, 4] normalized cxcywh (ignored where
    invisible); masks: [T, h, w] in {0,1} at the prediction stride.
    """

    def __init__(self, visibility: torch.Tensor, boxes: torch.Tensor, masks: torch.Tensor):
        if not (visibility.shape[0] == boxes.shape[0] == masks.shape[0]):
            raise ContractError("ground-truth frame counts disagree")
        self.visibility = visibility
        self.boxes = boxes
        self.masks = masks

    @property
    def frames(self) -> int:
        return self.visibility.shape[0]


def focal_loss(p: torch.Tensor, target: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise focal loss on probabilities against {0,1} targets.

    Both log arguments are clamped at EPS. Clamping p itself to [EPS, 1-EPS]
    would be a no-op on the upper side in float32, where 1-1e-8 rounds back
    to 1.0 and a saturated sigmoid then yields log(0).
    """
    pos = -alpha * (1.0 - p).pow(gamma) * torch.log(p.clamp(min=EPS))
    neg = -(1.0 - alpha) * p.pow(gamma) * torch.log((1.0 - p).clamp(min=EPS))
    return target * pos + (1.0 - target) * neg


def _cxcywh_to_corners(b: torch.Tensor):
    cx, cy, w, h = b.unbind(-1)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - GIoU for normalized cxcywh boxes, elementwise over leading dims."""
    px1, py1, px2, py2 = _cxcywh_to_corners(pred)
    gx1, gy1, gx2, gy2 = _cxcywh_to_corners(gt)
    inter_w = (torch.min(px2, gx2) - torch.max(px1, gx1)).clamp(min=0)
    inter_h = (torch.min(py2, gy2) - torch.max(py1, gy1)).clamp(min=0)
    inter = inter_w * inter_h
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    hull = (torch.max(px2, gx2) - torch.min(px1, gx1)) \
        * (torch.max(py2, gy2) - torch.min(py1, gy1))
    iou = inter / union.clamp(min=EPS)
    giou = iou - (hull - union) / hull.clamp(min=EPS)
    return 1.0 - giou


def box_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum of absolute coordinate errors over the last axis."""
    return (pred - gt).abs().sum(-1)


def dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft dice with +1 smoothing, reduced over the trailing two (spatial) axes."""
    p = torch.sigmoid(logits)
    num = 2.0 * (p * target).sum((-2, -1)) + 1.0
    den = p.sum((-2, -1)) + target.sum((-2, -1)) + 1.0
    return 1.0 - num / den


def mask_focal_loss(logits: torch.Tensor, target: torch.Tensor,
                    alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Per-pixel focal loss on sigmoid(logits), averaged over the spatial axes."""
    return focal_loss(torch.sigmoid(logits), target, alpha, gamma).mean((-2, -1))


def sequence_costs(gt: GroundTruth, probs: torch.Tensor, boxes: torch.Tensor,
                   mask_logits: torch.Tensor, w: LossConfig) -> torch.Tensor:
    """Matching cost of every predicted sequence against one ground truth.

    probs: [T, N]; boxes: [T, N, 4]; mask_logits: [T, N, h, w]. Returns [N]
    costs, each a per-frame sum divided by T.
    """
    t = gt.frames
    if probs.shape[0] != t:
        raise ContractError(f"prediction has {probs.shape[0]} frames, ground truth {t}")
    vis = gt.visibility.reshape(t, 1)
    cls = focal_loss(probs, vis.expand_as(probs), w.focal_alpha, w.focal_gamma)
    l1 = box_l1(boxes, gt.boxes.unsqueeze(1))
    giou = giou_loss(boxes, gt.boxes.unsqueeze(1))
    dice = dice_loss(mask_logits, gt.masks.unsqueeze(1))
    mfoc = mask_focal_loss(mask_logits, gt.masks.unsqueeze(1), w.focal_alpha, w.focal_gamma)
    per_frame = w.lambda_cls * cls \
        + vis * (w.lambda_l1 * l1 + w.lambda_giou * giou
                 + w.lambda_dice * dice + w.lambda_focal * mfoc)
    return per_frame.sum(0) / t


def matching_cost(gt: GroundTruth, probs: torch.Tensor, boxes: torch.Tensor,
                  mask_logits: torch.Tensor, w: LossConfig) -> torch.Tensor:
    """Cost of a single predicted sequence (probs [T], boxes [T,4], logits [T,h,w])."""
    return sequence_costs(gt, probs.unsqueeze(1), boxes.unsqueeze(1),
                          mask_logits.unsqueeze(1), w)[0]


def _argmin_first(costs: torch.Tensor) -> int:
    """Index of the smallest cost, lowest index on ties."""
    if not torch.isfinite(costs).all():
        raise NumericError(f"matching costs are not finite: {costs.detach().tolist()}")
    return int(torch.nonzero(costs == costs.min())[0, 0])


def select_positive(gt: GroundTruth, probs: torch.Tensor, boxes: torch.Tensor,
                    mask_logits: torch.Tensor, w: LossConfig) -> int:
    """Index of the minimum-cost sequence; ties go to the lowest index."""
    return _argmin_first(sequence_costs(gt, probs, boxes, mask_logits, w))


def training_loss(gt: GroundTruth, probs: torch.Tensor, boxes: torch.Tensor,
                  mask_logits: torch.Tensor, w: LossConfig,
                  supervise_negatives: bool = True):
    """Loss of one prediction set: the positive sequence's matching cost, plus
    (optionally) a class term pushing every other query toward 0.

    Returns (loss, parts) where parts maps term names to floats for logging.
    """
    costs = sequence_costs(gt, probs, boxes, mask_logits, w)
    pos = _argmin_first(costs)
    loss = costs[pos]
    parts = {"matched": float(costs[pos].detach()), "positive_index": pos, "negatives": 0.0}
    n = probs.shape[1]
    if supervise_negatives and n > 1:
        neg_mask = torch.ones(n, dtype=torch.bool, device=probs.device)
        neg_mask[pos] = False
        neg = focal_loss(probs[:, neg_mask], torch.zeros_like(probs[:, neg_mask]),
                         w.focal_alpha, w.focal_gamma).mean()
        loss = loss + w.lambda_cls * neg
        parts["negatives"] = float(neg.detach())
    return loss, parts
