"""Hand-rolled reference implementations the test suite checks the package against.

Everything in this module is deliberately independent of the package code:
plain python floats, O(n^2) loops, no torch.  Slow and obvious on purpose so
that a disagreement points at the fast implementation, not the oracle.
"""

from __future__ import annotations

import numpy as np


def iou_xyxy(a, b) -> float:
    """IoU of two corner-form tuples (x0, y0, x1, y1)."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    a_area = (a[2] - a[0]) * (a[3] - a[1])
    b_area = (b[2] - b[0]) * (b[3] - b[1])
    union = a_area + b_area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_xyxy(a, b) -> float:
    """Generalized IoU of two corner-form tuples."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    a_area = (a[2] - a[0]) * (a[3] - a[1])
    b_area = (b[2] - b[0]) * (b[3] - b[1])
    union = a_area + b_area - inter
    ex = max(a[2], b[2]) - min(a[0], b[0])
    ey = max(a[3], b[3]) - min(a[1], b[1])
    enclose = ex * ey
    val = inter / union if union > 0.0 else 0.0
    if enclose > 0.0:
        val -= (enclose - union) / enclose
    return val


def brute_nms(boxes, scores, thresh: float) -> list[int]:
    """Greedy NMS by exhaustive comparison; returns kept indices in keep order.

    A box survives iff its IoU with every higher-ranked survivor is <= thresh.
    Rank order is descending score, ties toward the lower input index.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou_xyxy(boxes[i], boxes[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


def brute_match(gt_boxes, cand_boxes) -> list[int]:
    """Greedy one-to-one assignment of ground-truth boxes to candidates.

    Instances claim candidates in descending order of their best achievable
    IoU (ties toward the lower instance index); each takes its highest-IoU
    unused candidate (ties toward the lower candidate index).
    """
    k, n = len(gt_boxes), len(cand_boxes)
    ious = [[iou_xyxy(g, c) for c in cand_boxes] for g in gt_boxes]
    best = [max(row) for row in ious]
    order = sorted(range(k), key=lambda i: (-best[i], i))
    used: set[int] = set()
    out = [-1] * k
    for i in order:
        free = [j for j in range(n) if j not in used]
        j = max(free, key=lambda jj: (ious[i][jj], -jj))
        out[i] = j
        used.add(j)
    return out


def fd_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        gflat[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2.0 * h)
    return grad


def reference_ap(preds_per_image, gts_per_image, thresholds) -> float:
    """Interpolated box AP on the 0..100 scale, averaged over the categories
    present in the ground truth and then over IoU thresholds.

    ``preds_per_image``: per image, a list of (category, score, xyxy tuple).
    ``gts_per_image``: per image, a list of (category, xyxy tuple).
    """
    categories = sorted({c for gts in gts_per_image for (c, _) in gts})
    threshold_means = []
    for thresh in thresholds:
        cat_aps = []
        for cat in categories:
            npos = sum(1 for gts in gts_per_image for (c, _) in gts if c == cat)
            if npos == 0:
                continue
            flat = []
            for img, preds in enumerate(preds_per_image):
                for c, score, box in preds:
                    if c == cat:
                        flat.append((score, img, box))
            flat.sort(key=lambda t: (-t[0], t[1]))
            unmatched = [
                [box for (c, box) in gts if c == cat] for gts in gts_per_image
            ]
            curve = []  # (recall, precision) after each prediction
            tp = fp = 0
            for score, img, box in flat:
                best, best_i = 0.0, None
                for i, gt_box in enumerate(unmatched[img]):
                    if gt_box is None:
                        continue
                    v = iou_xyxy(box, gt_box)
                    if v > best:
                        best, best_i = v, i
                if best_i is not None and best >= thresh:
                    unmatched[img][best_i] = None
                    tp += 1
                else:
                    fp += 1
                curve.append((tp / npos, tp / (tp + fp)))
            samples = []
            for k in range(101):
                r = k / 100.0
                best_p = 0.0
                for rec, prec in curve:
                    if rec >= r and prec > best_p:
                        best_p = prec
                samples.append(best_p)
            cat_aps.append(sum(samples) / 101.0)
        threshold_means.append(sum(cat_aps) / len(cat_aps) if cat_aps else 0.0)
    return 100.0 * sum(threshold_means) / len(threshold_means)


def random_single_raw(model, rng):
    """Randomized dense outputs with the model's anchor geometry.

    Logits are hot enough that many rows cross the score threshold, so
    suppression paths get exercised.
    """
    import torch
    from detinvert.models import SingleStageRaw

    n = model.anchor_boxes.shape[0]
    c = model.config.num_categories
    cls = torch.from_numpy(rng.normal(0.0, 3.0, (n, c))).float()
    reg = torch.from_numpy(rng.normal(0.0, 1.0, (n, 4))).float()
    return SingleStageRaw(cls, reg, model.anchor_boxes.clone())


def random_two_raw(model, rng):
    """Randomized two-stage outputs over live proposals from a random image."""
    import torch

    img = torch.from_numpy(rng.uniform(0.0, 1.0, (3,) + model.config.image_size[::-1])).float()
    with torch.no_grad():
        raw = model.forward_raw(img, with_masks=False)
    n1 = raw.rpn_logits.shape[0]
    r = raw.proposals.shape[0]
    c = model.config.num_categories
    raw.rpn_logits = torch.from_numpy(rng.normal(0.0, 2.0, (n1,))).float()
    raw.rpn_deltas = torch.from_numpy(rng.normal(0.0, 0.5, (n1, 4))).float()
    raw.cls_logits = torch.from_numpy(rng.normal(0.0, 3.0, (r, c + 1))).float()
    raw.reg_deltas = torch.from_numpy(rng.normal(0.0, 0.5, (r, 4))).float()
    return raw
