import math

import numpy as np
import pytest
import torch

from bifit.config import LossConfig
from bifit.errors import ContractError, NumericError
from bifit.losses import (
    GroundTruth,
    box_l1,
    dice_loss,
    focal_loss,
    giou_loss,
    mask_focal_loss,
    matching_cost,
    select_positive,
    sequence_costs,
    training_loss,
)

W = LossConfig()


def make_gt(t=2, h=4, wd=4, visible=None, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    vis = np.ones(t) if visible is None else np.asarray(visible, dtype=np.float64)
    cxy = rng.uniform(0.3, 0.7, size=(t, 2))
    wh = rng.uniform(0.1, 0.3, size=(t, 2))
    masks = (rng.random((t, h, wd)) > 0.5).astype(np.float64)
    return GroundTruth(
        torch.tensor(vis, dtype=dtype),
        torch.tensor(np.concatenate([cxy, wh], axis=1), dtype=dtype),
        torch.tensor(masks, dtype=dtype),
    )


def rand_pred(t=2, n=3, h=4, wd=4, seed=1, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    probs = torch.tensor(rng.uniform(0.05, 0.95, (t, n)), dtype=dtype)
    boxes = torch.tensor(rng.uniform(0.1, 0.9, (t, n, 4)), dtype=dtype)
    logits = torch.tensor(rng.normal(0, 2, (t, n, h, wd)), dtype=dtype)
    return probs, boxes, logits


# ---------------------------------------------------------------- unit values

def test_focal_loss_unit_values():
    p = torch.tensor(0.5)
    assert float(focal_loss(p, torch.tensor(1.0))) == pytest.approx(
        0.25 * 0.25 * (-math.log(0.5)), abs=1e-7)
    assert float(focal_loss(p, torch.tensor(1.0))) == pytest.approx(0.04332, abs=1e-5)
    assert float(focal_loss(p, torch.tensor(0.0))) == pytest.approx(0.12997, abs=1e-5)
    near_one = torch.tensor(1.0 - 1e-7, dtype=torch.float64)
    assert float(focal_loss(near_one, torch.tensor(1.0, dtype=torch.float64))) < 1e-12


def test_focal_loss_finite_at_saturated_probabilities():
    # float32 sigmoid saturates to exactly 0/1; the loss must stay finite
    for p in (0.0, 1.0):
        for t in (0.0, 1.0):
            v = focal_loss(torch.tensor(p), torch.tensor(t))
            assert torch.isfinite(v), (p, t)


def test_giou_loss_identical_boxes():
    b = torch.tensor([0.5, 0.5, 0.2, 0.4])
    assert float(giou_loss(b, b)) == pytest.approx(0.0, abs=1e-6)


def test_giou_loss_hand_geometry():
    b1 = torch.tensor([0.25, 0.25, 0.5, 0.5])
    b2 = torch.tensor([0.75, 0.75, 0.5, 0.5])
    assert float(giou_loss(b1, b2)) == pytest.approx(1.5, abs=1e-6)


def test_giou_loss_bounded():
    rng = np.random.default_rng(2)
    for _ in range(100):
        b1 = torch.tensor(np.concatenate([rng.uniform(0, 1, 2), rng.uniform(0.01, 1, 2)]))
        b2 = torch.tensor(np.concatenate([rng.uniform(0, 1, 2), rng.uniform(0.01, 1, 2)]))
        v = float(giou_loss(b1, b2))
        assert 0.0 - 1e-9 <= v <= 2.0 + 1e-9


def test_dice_loss_two_by_two():
    logits = torch.tensor([[40.0, -40.0], [-40.0, -40.0]])
    target = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
    assert float(dice_loss(logits, target)) == pytest.approx(1.0 - 1.0 / 3.0, abs=1e-6)


def test_dice_loss_empty_target_perfect_prediction():
    logits = torch.full((3, 3), -40.0)
    target = torch.zeros(3, 3)
    assert float(dice_loss(logits, target)) == pytest.approx(0.0, abs=1e-6)


def test_dice_loss_perfect_hard_prediction():
    target = (torch.rand(5, 5) > 0.5).double()
    logits = target * 80.0 - 40.0
    assert float(dice_loss(logits, target)) == pytest.approx(0.0, abs=1e-6)


def test_mask_focal_zero_logits_empty_target():
    logits = torch.zeros(4, 4)
    target = torch.zeros(4, 4)
    assert float(mask_focal_loss(logits, target)) == pytest.approx(0.12997, abs=1e-5)


def test_mask_focal_permutation_invariant():
    logits = torch.randn(3, 4)
    target = (torch.rand(3, 4) > 0.5).float()
    base = float(mask_focal_loss(logits, target))
    perm = torch.randperm(12)
    shuffled = float(mask_focal_loss(
        logits.flatten()[perm].reshape(3, 4), target.flatten()[perm].reshape(3, 4)))
    assert shuffled == pytest.approx(base, rel=1e-6)


def test_box_l1_sums_coordinates():
    a = torch.tensor([0.1, 0.2, 0.3, 0.4])
    b = torch.tensor([0.2, 0.0, 0.3, 0.8])
    assert float(box_l1(a, b)) == pytest.approx(0.1 + 0.2 + 0.0 + 0.4, abs=1e-7)


# ---------------------------------------------------------- matching cost

def test_matching_cost_perfect_prediction_is_class_only():
    gt = make_gt(t=2)
    probs = torch.full((2,), 1.0 - 1e-9, dtype=torch.float64)
    logits = gt.masks * 80.0 - 40.0
    cost = float(matching_cost(gt, probs, gt.boxes.clone(), logits, W))
    assert cost == pytest.approx(0.0, abs=1e-5)


def test_matching_cost_single_frame_composition():
    gt = make_gt(t=1)
    probs = torch.tensor([0.5], dtype=torch.float64)
    logits = gt.masks * 80.0 - 40.0
    cost = float(matching_cost(gt, probs, gt.boxes.clone(), logits, W))
    assert cost == pytest.approx(2 * 0.04332, abs=1e-4)


def test_matching_cost_normalized_by_frames():
    # a 2-frame cost equals the mean of the two single-frame costs
    gt = make_gt(t=2, seed=3)
    probs, boxes, logits = rand_pred(t=2, n=1, seed=4)
    both = float(matching_cost(gt, probs[:, 0], boxes[:, 0], logits[:, 0], W))
    singles = []
    for t in range(2):
        g1 = GroundTruth(gt.visibility[t:t + 1], gt.boxes[t:t + 1], gt.masks[t:t + 1])
        singles.append(float(matching_cost(
            g1, probs[t:t + 1, 0], boxes[t:t + 1, 0], logits[t:t + 1, 0], W)))
    assert both == pytest.approx(sum(singles) / 2, rel=1e-9)


def test_invisible_frames_ignore_box_and_mask():
    gt = make_gt(t=3, visible=[1, 0, 1], seed=5)
    probs, boxes, logits = rand_pred(t=3, n=2, seed=6)
    base = sequence_costs(gt, probs, boxes, logits, W)
    boxes2 = boxes.clone()
    logits2 = logits.clone()
    boxes2[1] = torch.rand_like(boxes2[1])
    logits2[1] = torch.randn_like(logits2[1])
    altered = sequence_costs(gt, probs, boxes2, logits2, W)
    assert torch.equal(base, altered)


def test_frame_permutation_invariance():
    gt = make_gt(t=4, visible=[1, 0, 1, 1], seed=7)
    probs, boxes, logits = rand_pred(t=4, n=2, seed=8)
    base = sequence_costs(gt, probs, boxes, logits, W)
    perm = torch.tensor([2, 0, 3, 1])
    gt_p = GroundTruth(gt.visibility[perm], gt.boxes[perm], gt.masks[perm])
    permuted = sequence_costs(gt_p, probs[perm], boxes[perm], logits[perm], W)
    assert torch.allclose(base, permuted, atol=1e-12)


def test_costs_nonnegative():
    for seed in range(5):
        gt = make_gt(t=3, seed=seed)
        probs, boxes, logits = rand_pred(t=3, n=4, seed=seed + 100)
        costs = sequence_costs(gt, probs, boxes, logits, W)
        assert torch.all(costs >= 0)


def test_frame_count_mismatch_rejected():
    gt = make_gt(t=2)
    probs, boxes, logits = rand_pred(t=3, n=2)
    with pytest.raises(ContractError):
        sequence_costs(gt, probs, boxes, logits, W)


# ---------------------------------------------------------- selection

def test_select_positive_single_candidate():
    gt = make_gt(t=2)
    probs, boxes, logits = rand_pred(t=2, n=1)
    assert select_positive(gt, probs, boxes, logits, W) == 0


def test_select_positive_prefers_exact_ground_truth():
    gt = make_gt(t=2, seed=9)
    probs, boxes, logits = rand_pred(t=2, n=4, seed=10)
    probs[:, 2] = 1.0 - 1e-9
    boxes[:, 2] = gt.boxes
    logits[:, 2] = gt.masks * 80.0 - 40.0
    assert select_positive(gt, probs, boxes, logits, W) == 2


def test_select_positive_tie_takes_lowest_index():
    gt = make_gt(t=1)
    probs, boxes, logits = rand_pred(t=1, n=3)
    probs[:, 1] = probs[:, 0]
    boxes[:, 1] = boxes[:, 0]
    logits[:, 1] = logits[:, 0]
    costs = sequence_costs(gt, probs, boxes, logits, W)
    assert float(costs[0]) == float(costs[1])
    if float(costs[2]) > float(costs[0]):
        assert select_positive(gt, probs, boxes, logits, W) == 0


def test_select_positive_rejects_nonfinite_costs():
    gt = make_gt(t=1)
    probs, boxes, logits = rand_pred(t=1, n=2)
    probs[0, 0] = float("nan")
    with pytest.raises(NumericError):
        select_positive(gt, probs, boxes, logits, W)


def test_argmin_invariant_under_weight_rescaling():
    for seed in range(10):
        gt = make_gt(t=2, seed=seed)
        probs, boxes, logits = rand_pred(t=2, n=4, seed=seed + 50)
        base = select_positive(gt, probs, boxes, logits, W)
        scaled = LossConfig()
        for field in ("lambda_cls", "lambda_l1", "lambda_giou", "lambda_dice", "lambda_focal"):
            setattr(scaled, field, getattr(W, field) * 7.3)
        assert select_positive(gt, probs, boxes, logits, scaled) == base


# ------------------------------------------------- independent numpy oracle

def np_focal(p, target, a=0.25, g=2.0):
    p = np.asarray(p, dtype=np.float64)
    pos = -a * (1 - p) ** g * np.log(np.maximum(p, 1e-8))
    neg = -(1 - a) * p ** g * np.log(np.maximum(1 - p, 1e-8))
    return target * pos + (1 - target) * neg


def np_giou(b1, b2):
    def corners(b):
        return b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    ax1, ay1, ax2, ay2 = corners(b1)
    bx1, by1, bx2, by2 = corners(b2)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    giou = inter / max(union, 1e-8) - (hull - union) / max(hull, 1e-8)
    return 1.0 - giou


def np_sequence_cost(vis, gt_boxes, gt_masks, probs, boxes, logits, w):
    total = 0.0
    t = len(vis)
    for i in range(t):
        cost = w.lambda_cls * float(np_focal(probs[i], vis[i]))
        if vis[i] > 0:
            cost += w.lambda_l1 * float(np.abs(boxes[i] - gt_boxes[i]).sum())
            cost += w.lambda_giou * np_giou(boxes[i], gt_boxes[i])
            p = 1.0 / (1.0 + np.exp(-logits[i]))
            num = 2.0 * (p * gt_masks[i]).sum() + 1.0
            den = p.sum() + gt_masks[i].sum() + 1.0
            cost += w.lambda_dice * (1.0 - num / den)
            cost += w.lambda_focal * float(np_focal(p, gt_masks[i]).mean())
        total += cost
    return total / t


def test_costs_match_numpy_reimplementation():
    rng = np.random.default_rng(42)
    for trial in range(30):
        t = int(rng.integers(1, 5))
        n = int(rng.integers(1, 7))
        vis = (rng.random(t) > 0.3).astype(np.float64)
        gt = GroundTruth(
            torch.tensor(vis),
            torch.tensor(np.concatenate(
                [rng.uniform(0.2, 0.8, (t, 2)), rng.uniform(0.05, 0.4, (t, 2))], axis=1)),
            torch.tensor((rng.random((t, 3, 3)) > 0.5).astype(np.float64)),
        )
        probs = torch.tensor(rng.uniform(0.01, 0.99, (t, n)))
        boxes = torch.tensor(rng.uniform(0.05, 0.95, (t, n, 4)))
        logits = torch.tensor(rng.normal(0, 3, (t, n, 3, 3)))
        got = sequence_costs(gt, probs, boxes, logits, W)
        for i in range(n):
            want = np_sequence_cost(vis, gt.boxes.numpy(), gt.masks.numpy(),
                                    probs[:, i].numpy(), boxes[:, i].numpy(),
                                    logits[:, i].numpy(), W)
            assert float(got[i]) == pytest.approx(want, rel=1e-9), f"trial {trial} seq {i}"
        brute = int(np.argmin([np_sequence_cost(
            vis, gt.boxes.numpy(), gt.masks.numpy(), probs[:, i].numpy(),
            boxes[:, i].numpy(), logits[:, i].numpy(), W) for i in range(n)]))
        assert select_positive(gt, probs, boxes, logits, W) == brute


# ---------------------------------------------------------- training loss

def test_training_loss_flag_off_equals_matching_cost():
    gt = make_gt(t=2, seed=11)
    probs, boxes, logits = rand_pred(t=2, n=3, seed=12)
    pos = select_positive(gt, probs, boxes, logits, W)
    loss, parts = training_loss(gt, probs, boxes, logits, W, supervise_negatives=False)
    want = matching_cost(gt, probs[:, pos], boxes[:, pos], logits[:, pos], W)
    assert float(loss) == pytest.approx(float(want), rel=1e-12)
    assert parts["positive_index"] == pos
    assert parts["negatives"] == 0.0


def test_training_loss_negative_term_vanishes_for_confident_negatives():
    gt = make_gt(t=2, seed=13)
    probs, boxes, logits = rand_pred(t=2, n=3, seed=14)
    pos = select_positive(gt, probs, boxes, logits, W)
    for i in range(3):
        if i != pos:
            probs[:, i] = 1e-9
    # selection can shift when probabilities change; pin it back
    if select_positive(gt, probs, boxes, logits, W) == pos:
        loss_on, _ = training_loss(gt, probs, boxes, logits, W, supervise_negatives=True)
        loss_off, _ = training_loss(gt, probs, boxes, logits, W, supervise_negatives=False)
        assert float(loss_on) == pytest.approx(float(loss_off), abs=1e-8)


def test_training_loss_two_query_hand_composition():
    gt = make_gt(t=1, seed=15)
    probs = torch.tensor([[0.9, 0.3]], dtype=torch.float64)
    boxes = torch.stack([gt.boxes[0], torch.tensor([0.1, 0.1, 0.05, 0.05],
                                                   dtype=torch.float64)]).unsqueeze(0)
    logits = torch.stack([gt.masks[0] * 80 - 40, -torch.ones_like(gt.masks[0])]).unsqueeze(0)
    loss, parts = training_loss(gt, probs, boxes, logits, W, supervise_negatives=True)
    assert parts["positive_index"] == 0
    want = matching_cost(gt, probs[:, 0], boxes[:, 0], logits[:, 0], W) \
        + W.lambda_cls * focal_loss(probs[:, 1], torch.zeros(1, dtype=torch.float64)).mean()
    assert float(loss) == pytest.approx(float(want), rel=1e-12)


def test_training_loss_gradients_match_finite_differences():
    torch.manual_seed(4)
    gt = make_gt(t=2, h=3, wd=3, seed=16)
    probs0, boxes0, logits0 = rand_pred(t=2, n=2, h=3, wd=3, seed=17)

    def f(probs, boxes, logits):
        return training_loss(gt, probs, boxes, logits, W, supervise_negatives=True)[0]

    inputs = (probs0.requires_grad_(True), boxes0.requires_grad_(True),
              logits0.requires_grad_(True))
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)
