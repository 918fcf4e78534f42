"""Evaluation and aggregate statistics over detector outputs.

Covers box AP with the 101-point interpolated protocol, cross-model transfer
tables built from synthesized images, contextual co-occurrence counts over
single-candidate visualization runs, relative-position histograms, and
object-scale sweeps.  Functions that synthesize images default to the
inversion module but accept an injectable callable for testing.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .geometry import SCALE_REFERENCE_SIDES, Box, Layout, pairwise_iou
from .inversion import (
    InversionConfig,
    invert_layout,
    invert_layout_two_stage,
    visualize_single_anchor,
)
from .models import TwoStageDetector

__all__ = [
    "DEFAULT_IOU_THRESHOLDS",
    "evaluate_ap",
    "transfer_matrix",
    "tally_context",
    "context_frequency",
    "relative_position",
    "position_histogram",
    "scale_sweep",
]

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _category_curve(
    preds: list[tuple[int, float, Box]],
    gts: dict[int, list[Box]],
    thresh: float,
) -> float:
    """Interpolated AP (0..1) for one category at one IoU threshold."""
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return float("nan")
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][1], preds[k][0], k))
    taken: dict[int, list[bool]] = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, k in enumerate(order):
        img, _, box = preds[k]
        boxes = gts.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(boxes):
            if taken[img][j]:
                continue
            iou_t = pairwise_iou(
                torch.tensor([box.to_xyxy()], dtype=torch.float64),
                torch.tensor([gt_box.to_xyxy()], dtype=torch.float64),
            )[0, 0].item()
            if iou_t > best_iou:
                best_iou, best_j = iou_t, j
        if best_j >= 0 and best_iou >= thresh:
            taken[img][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # precision envelope: best precision achievable at or beyond each point
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    samples = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, samples, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def evaluate_ap(
    predictions: list[Layout],
    ground_truths: list[Layout],
    iou_thresholds: tuple[float, ...] | None = None,
    max_detections: int = 100,
) -> dict:
    """Box AP over paired prediction/ground-truth layouts.

    Follows the usual interpolated protocol: detections are ranked by score
    per category across the whole set, greedily matched to the unmatched
    ground truth of highest IoU in their image, and precision is sampled at
    101 recall points.  The returned ``ap`` averages categories that have
    ground truth, then thresholds, on a 0..100 scale.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"{len(predictions)} predictions for {len(ground_truths)} ground-truth layouts"
        )
    if iou_thresholds is None:
        iou_thresholds = DEFAULT_IOU_THRESHOLDS
    total_gt = sum(len(g) for g in ground_truths)
    if total_gt == 0:
        raise ValueError("no ground-truth instances; AP is undefined")

    categories = sorted({d.category for g in ground_truths for d in g})
    by_cat_preds: dict[int, list[tuple[int, float, Box]]] = {c: [] for c in categories}
    by_cat_gts: dict[int, dict[int, list[Box]]] = {c: {} for c in categories}
    for img, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        capped = pred.sorted_by_score()[:max_detections] if len(pred) > max_detections else pred
        for d in capped:
            if d.category in by_cat_preds:
                by_cat_preds[d.category].append((img, d.score, d.box))
        for d in gt:
            by_cat_gts[d.category].setdefault(img, []).append(d.box)

    per_threshold: dict[float, float] = {}
    per_category: dict[int, float] = {}
    cat_sums = {c: [] for c in categories}
    for t in iou_thresholds:
        vals = []
        for c in categories:
            ap_ct = _category_curve(by_cat_preds[c], by_cat_gts[c], t)
            if not np.isnan(ap_ct):
                vals.append(ap_ct)
                cat_sums[c].append(ap_ct)
        per_threshold[t] = 100.0 * float(np.mean(vals)) if vals else 0.0
    for c in categories:
        per_category[c] = 100.0 * float(np.mean(cat_sums[c])) if cat_sums[c] else 0.0
    ap = float(np.mean([per_threshold[t] for t in iou_thresholds]))
    return {
        "ap": ap,
        "per_threshold": per_threshold,
        "per_category": per_category,
        "num_images": len(predictions),
        "num_gt": total_gt,
    }


def _default_invert(model, layout: Layout, seed: int, config: InversionConfig):
    cfg = replace(config, seed=seed)
    if isinstance(model, TwoStageDetector):
        return invert_layout_two_stage(model, layout, cfg)
    return invert_layout(model, layout, cfg)


def _synthesis_output(out) -> tuple:
    """Normalize a synthesis return to (image, converged)."""
    if hasattr(out, "image") and hasattr(out, "success"):
        return out.image, bool(out.success)
    return out, True


def transfer_matrix(
    models: list,
    layouts: list[Layout],
    config: InversionConfig | None = None,
    invert_fn=None,
    iou_thresholds: tuple[float, ...] = (0.5,),
    score_thresh: float = 0.05,
) -> dict:
    """Cross-model evaluation of synthesized images.

    Row ``i``: images synthesized against ``models[i]`` for each layout,
    seeded ``config.seed + layout_index`` so rows are comparable.  Entry
    ``[i][j]``: AP of ``models[j]`` reading row ``i``'s images, scored
    against the layouts the synthesis aimed for.  Syntheses whose own model
    fails to re-detect the layout are excluded from the row's evaluation and
    counted in ``failed``.

    ``invert_fn(model, layout, seed)`` overrides how images are produced; it
    may return either a bare image or an inversion result carrying
    ``image`` and ``success``.
    """
    if not models or not layouts:
        raise ValueError("need at least one model and one layout")
    config = config or InversionConfig()
    if invert_fn is None:
        invert_fn = lambda m, l, s: _default_invert(m, l, s, config)
    seeds = [config.seed + k for k in range(len(layouts))]
    matrix, failed, evaluated = [], [], []
    for model in models:
        outs = [invert_fn(model, layout, seed) for layout, seed in zip(layouts, seeds)]
        pairs = [_synthesis_output(o) for o in outs]
        kept = [k for k, (_, ok) in enumerate(pairs) if ok]
        failed.append(len(layouts) - len(kept))
        evaluated.append(len(kept))
        row = []
        for reader in models:
            if not kept:
                row.append(0.0)
                continue
            preds = [
                reader.detect(pairs[k][0], score_thresh=score_thresh) for k in kept
            ]
            truth = [layouts[k] for k in kept]
            row.append(evaluate_ap(preds, truth, iou_thresholds=iou_thresholds)["ap"])
        matrix.append(row)
    return {
        "matrix": matrix,
        "failed": failed,
        "evaluated": evaluated,
        "seeds": seeds,
        "num_layouts": len(layouts),
        "iou_thresholds": list(iou_thresholds),
    }


def tally_context(
    runs: list[tuple[int, Layout]],
    num_categories: int,
    score_thresh: float = 0.5,
) -> dict:
    """Co-occurrence of extra objects in per-run layouts.

    ``runs`` pairs the category a run aimed for with the layout read back
    from its output image.  A category counts at most once per run, must
    score above ``score_thresh``, and the aimed-for category itself is not
    context.
    """
    run_counts = np.zeros(num_categories, dtype=int)
    counts = np.zeros((num_categories, num_categories), dtype=int)
    for target, layout in runs:
        if not 0 <= target < num_categories:
            raise ValueError(f"target category {target} out of range")
        run_counts[target] += 1
        seen = {d.category for d in layout if d.score > score_thresh and d.category != target}
        for c in seen:
            if 0 <= c < num_categories:
                counts[target, c] += 1
    with np.errstate(invalid="ignore"):
        freq = counts / np.maximum(run_counts[:, None], 1)
    return {
        "runs": run_counts.tolist(),
        "counts": counts.tolist(),
        "frequency": freq.tolist(),
    }


def _center_instance(layout: Layout, category: int, anchor_box: Box,
                     score_thresh: float):
    """The detection of ``category`` sitting on the visualized candidate box."""
    best, best_iou = None, 0.0
    ref = torch.tensor([anchor_box.to_xyxy()], dtype=torch.float64)
    for d in layout:
        if d.category != category or d.score <= score_thresh:
            continue
        iou = float(pairwise_iou(torch.tensor([d.box.to_xyxy()], dtype=torch.float64), ref))
        if iou > best_iou:
            best, best_iou = d, iou
    return best


def context_frequency(
    model,
    category: int,
    anchor_index: int,
    n_runs: int,
    config: InversionConfig | None = None,
    visualize_fn=None,
    score_thresh: float = 0.5,
) -> dict:
    """Which other objects emerge around single-candidate visualizations.

    Runs the visualization ``n_runs`` times with seeds ``config.seed + i``,
    reads each output image back through the detector, and tallies the other
    categories scoring above ``score_thresh`` (each at most once per run;
    the visualized category itself is not context).  Contextual detections
    are also paired with the central instance, when one sits on the
    visualized candidate box, for relative-position histograms.  The per-run
    detection log is returned so every number can be recounted from it.
    """
    config = config or InversionConfig()
    if n_runs < 0:
        raise ValueError(f"n_runs must be >= 0, got {n_runs}")
    c = model.config.num_categories
    if not 0 <= category < c:
        raise ValueError(f"category {category} outside [0, {c})")
    if visualize_fn is None:
        visualize_fn = visualize_single_anchor
    seeds = list(range(config.seed, config.seed + n_runs))
    runs, log, converged = [], [], 0
    pair_boxes: dict[int, list[tuple[Box, Box]]] = {}
    for seed in seeds:
        res = visualize_fn(model, anchor_index, category, replace(config, seed=seed))
        layout = res.detections
        converged += bool(res.success)
        runs.append((category, layout))
        center = _center_instance(layout, category, res.anchor_box, score_thresh)
        if center is not None:
            for d in layout:
                if d.category != category and d.score > score_thresh:
                    pair_boxes.setdefault(d.category, []).append((d.box, center.box))
        log.append({
            "seed": seed,
            "success": bool(res.success),
            "prob": None if res.prob is None else float(res.prob),
            "center": None if center is None else center.box.to_xyxy(),
            "detections": [
                {"category": d.category, "score": float(d.score), "box": d.box.to_xyxy()}
                for d in layout
            ],
        })
    table = tally_context(runs, c, score_thresh)
    return {
        "category": category,
        "anchor_index": anchor_index,
        "n_runs": n_runs,
        "seeds": seeds,
        "counts": table["counts"][category],
        "frequency": table["frequency"][category],
        "positions": {
            cat: position_histogram(pairs) for cat, pairs in sorted(pair_boxes.items())
        },
        "visualization_success_rate": converged / n_runs if n_runs else 0.0,
        "log": log,
    }


def relative_position(subject: Box, anchor: Box, tie_tol: float = 1e-6) -> tuple[str, str]:
    """(vertical, horizontal) placement of ``subject`` against ``anchor`` by centers."""
    sx, sy = subject.center
    ax, ay = anchor.center
    if abs(sy - ay) <= tie_tol:
        vert = "tie"
    else:
        vert = "above" if sy < ay else "below"
    if abs(sx - ax) <= tie_tol:
        horiz = "tie"
    else:
        horiz = "left" if sx < ax else "right"
    return vert, horiz


def position_histogram(pairs: list[tuple[Box, Box]], tie_tol: float = 1e-6) -> dict:
    """Counts of subject-vs-anchor placements over (subject, anchor) pairs."""
    vertical = {"above": 0, "below": 0, "tie": 0}
    horizontal = {"left": 0, "right": 0, "tie": 0}
    joint: dict[str, int] = {}
    for subject, anchor in pairs:
        v, h = relative_position(subject, anchor, tie_tol)
        vertical[v] += 1
        horizontal[h] += 1
        joint[f"{v}-{h}"] = joint.get(f"{v}-{h}", 0) + 1
    return {"total": len(pairs), "vertical": vertical, "horizontal": horizontal, "joint": joint}


def _redetect_iou(layout: Layout, category: int, anchor_box: Box) -> float:
    """Best IoU between the visualized candidate box and same-category detections."""
    boxes = [d.box.to_xyxy() for d in layout if d.category == category]
    if not boxes:
        return 0.0
    ious = pairwise_iou(
        torch.tensor(boxes, dtype=torch.float64),
        torch.tensor([anchor_box.to_xyxy()], dtype=torch.float64),
    )
    return float(ious.max())


def scale_sweep(
    model,
    category: int,
    config: InversionConfig | None = None,
    per_bucket: int = 5,
    visualize_fn=None,
) -> dict:
    """Single-candidate visualization quality per object-size bucket.

    For every covered size bucket, picks the anchor of that bucket whose box
    center lies closest to the image center and visualizes it ``per_bucket``
    times with distinct seeds.  Reports the confidence success rate, the IoU
    between the candidate box and the re-detected object, and the output
    images.  Buckets without anchor coverage are skipped with a notice.
    """
    config = config or InversionConfig()
    if per_bucket < 1:
        raise ValueError(f"per_bucket must be >= 1, got {per_bucket}")
    c = model.config.num_categories
    if not 0 <= category < c:
        raise ValueError(f"category {category} outside [0, {c})")
    if visualize_fn is None:
        visualize_fn = visualize_single_anchor
    grid = model.anchor_grid
    h, w = model.config.image_size
    covered = set(grid.covered_buckets())
    results: dict[int, dict] = {}
    for bucket in range(1, len(SCALE_REFERENCE_SIDES) + 1):
        idxs = grid.indices_in_bucket(bucket) if bucket in covered else None
        if idxs is None or idxs.numel() == 0:
            results[bucket] = {"skipped": "no anchor coverage"}
            continue
        boxes = grid.boxes[idxs].double()
        cx = (boxes[:, 0] + boxes[:, 2]) / 2
        cy = (boxes[:, 1] + boxes[:, 3]) / 2
        centrality = (cx - w / 2) ** 2 + (cy - h / 2) ** 2
        anchor_index = int(idxs[int(torch.argmin(centrality))])
        anchor_box = grid.box_at(anchor_index)
        seeds, probs, ious, images = [], [], [], []
        succeeded = 0
        for i in range(per_bucket):
            seed = config.seed + (bucket - 1) * per_bucket + i
            seeds.append(seed)
            res = visualize_fn(model, anchor_index, category, replace(config, seed=seed))
            succeeded += bool(res.success)
            probs.append(0.0 if res.prob is None else float(res.prob))
            ious.append(_redetect_iou(res.detections, category, res.anchor_box))
            images.append(res.image)
        results[bucket] = {
            "anchor_index": anchor_index,
            "anchor_box": anchor_box.to_xyxy(),
            "side": float(anchor_box.width),
            "attempted": per_bucket,
            "succeeded": succeeded,
            "rate": succeeded / per_bucket,
            "mean_prob": float(np.mean(probs)),
            "mean_redetect_iou": float(np.mean(ious)),
            "seeds": seeds,
            "images": images,
        }
    return results
