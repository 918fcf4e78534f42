"""Box algebra, overlap measures, anchors, matching and NMS.

Everything detector-shaped in this package sits on top of this module: the
detectors use it for anchor generation and post-processing, the pseudo-target
projection uses it for matching and box encoding, and the evaluation code uses
it for IoU bookkeeping.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` in pixel units
throughout; center/size form appears only at the encode/decode boundary and in
JSON serialization (``[x, y, w, h]``, COCO convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "Box",
    "Detection",
    "Layout",
    "AnchorGrid",
    "iou",
    "giou",
    "pairwise_iou",
    "pairwise_giou",
    "elementwise_giou",
    "encode_boxes",
    "decode_boxes",
    "nms",
    "nms_indices",
    "match_by_iou",
    "scale_bucket",
    "build_anchor_grid",
    "SCALE_REFERENCE_SIDES",
]

# Reference side lengths for the five size buckets used by the scale sweep.
SCALE_REFERENCE_SIDES = (32.0, 64.0, 128.0, 256.0, 512.0)

# |dw|, |dh| are clamped here before exp() during decoding.  exp(8) ~ 3000x,
# far beyond any sane box/anchor ratio, so round-trips stay exact.
_DELTA_CLAMP = 8.0

_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form, pixel units."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> tuple[float, float, float, float]:
        """Corner-plus-size form used by the layout JSON files."""
        return (self.x_min, self.y_min, self.width, self.height)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Detection:
    """One object instance: a box, a category id, a score, an optional mask.

    Ground-truth instances reuse this type with ``score`` left at 1.0.
    ``mask``, when present, is a full-image boolean array.
    """

    box: Box
    category: int
    score: float = 1.0
    mask: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.mask is not None and self.mask.dtype != bool:
            object.__setattr__(self, "mask", self.mask.astype(bool))


@dataclass
class Layout:
    """Ordered collection of instances; detector output and inversion target."""

    instances: list[Detection]
    image_size: tuple[int, int] | None = None  # (height, width)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i: int) -> Detection:
        return self.instances[i]

    @property
    def categories(self) -> list[int]:
        return [d.category for d in self.instances]

    def boxes_tensor(self, dtype: torch.dtype = torch.float32) -> Tensor:
        if not self.instances:
            return torch.zeros((0, 4), dtype=dtype)
        return torch.tensor([d.box.to_xyxy() for d in self.instances], dtype=dtype)

    def sorted_by_score(self) -> "Layout":
        order = sorted(
            range(len(self.instances)),
            key=lambda i: (-self.instances[i].score, i),
        )
        return Layout([self.instances[i] for i in order], self.image_size)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint or zero-area input."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box.

    Lies in [-1, 1]; equals IoU when the smallest enclosing box is covered by
    the union, and 1 exactly when the boxes coincide (non-degenerate).
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    ex = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    ey = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    enclose = ex * ey
    iou_val = inter / union if union > 0.0 else 0.0
    if enclose <= 0.0:
        return iou_val
    return iou_val - (enclose - union) / enclose


def pairwise_iou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """IoU matrix between two corner-form box sets, shapes [N,4] x [M,4] -> [N,M]."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=_EPS), torch.zeros_like(inter))


def pairwise_giou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """Generalized IoU matrix, [N,4] x [M,4] -> [N,M]."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    iou_mat = torch.where(union > 0, inter / union.clamp(min=_EPS), torch.zeros_like(inter))
    elt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    erb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    penalty = torch.where(
        enclose > 0, (enclose - union) / enclose.clamp(min=_EPS), torch.zeros_like(enclose)
    )
    return iou_mat - penalty


def elementwise_giou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """Row-aligned generalized IoU, [N,4] x [N,4] -> [N].

    Differentiable in both arguments; this is the form used inside box loss
    terms (1 - giou).  Degenerate rows contribute the formula value with
    epsilon-guarded denominators instead of NaN.
    """
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, :2], boxes2[:, :2])
    rb = torch.min(boxes1[:, 2:], boxes2[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area1 + area2 - inter
    iou_val = inter / union.clamp(min=_EPS)
    elt = torch.min(boxes1[:, :2], boxes2[:, :2])
    erb = torch.max(boxes1[:, 2:], boxes2[:, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[:, 0] * ewh[:, 1]
    return iou_val - (enclose - union) / enclose.clamp(min=_EPS)


def encode_boxes(gt: Tensor, anchors: Tensor) -> Tensor:
    """Express ground-truth boxes as regression deltas relative to anchors.

    Parameterization: center offsets normalized by anchor size, log size
    ratios -- ``(dx, dy, dw, dh)``.  Anchors must be non-degenerate.
    """
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise ValueError("degenerate (zero-size) anchor in encode_boxes")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gw = (gt[:, 2] - gt[:, 0]).clamp(min=_EPS)
    gh = (gt[:, 3] - gt[:, 1]).clamp(min=_EPS)
    gcx = gt[:, 0] + 0.5 * (gt[:, 2] - gt[:, 0])
    gcy = gt[:, 1] + 0.5 * (gt[:, 3] - gt[:, 1])
    dx = (gcx - acx) / aw
    dy = (gcy - acy) / ah
    dw = torch.log(gw / aw)
    dh = torch.log(gh / ah)
    return torch.stack([dx, dy, dw, dh], dim=-1)


def decode_boxes(deltas: Tensor, anchors: Tensor) -> Tensor:
    """Inverse of :func:`encode_boxes`; differentiable in ``deltas``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(-_DELTA_CLAMP, _DELTA_CLAMP)
    dh = deltas[:, 3].clamp(-_DELTA_CLAMP, _DELTA_CLAMP)
    cx = dx * aw + acx
    cy = dy * ah + acy
    w = torch.exp(dw) * aw
    h = torch.exp(dh) * ah
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )


def nms_indices(boxes: Tensor, scores: Tensor, iou_thresh: float) -> Tensor:
    """Greedy NMS over one category; returns kept indices sorted by score.

    Score ties break toward the lower input index, so the result is
    deterministic for any input order.
    """
    n = boxes.shape[0]
    if n == 0:
        return torch.zeros((0,), dtype=torch.long)
    # stable sort keeps the lower original index first among equal scores
    order = torch.argsort(scores, descending=True, stable=True)
    boxes = boxes[order]
    keep: list[int] = []
    suppressed = torch.zeros(n, dtype=torch.bool)
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if i + 1 < n:
            rest = torch.arange(i + 1, n)
            rest = rest[~suppressed[i + 1 :]]
            if rest.numel():
                overlaps = pairwise_iou(boxes[i : i + 1], boxes[rest])[0]
                suppressed[rest[overlaps > iou_thresh]] = True
    return order[torch.tensor(keep, dtype=torch.long)]


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Per-category greedy NMS; output sorted by descending score."""
    if not dets:
        return []
    boxes = torch.tensor([d.box.to_xyxy() for d in dets], dtype=torch.float64)
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    cats = torch.tensor([d.category for d in dets], dtype=torch.long)
    kept: list[int] = []
    for c in torch.unique(cats):
        idx = torch.nonzero(cats == c, as_tuple=False).flatten()
        keep = nms_indices(boxes[idx], scores[idx], iou_thresh)
        kept.extend(idx[keep].tolist())
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


def match_by_iou(layout: Layout | Tensor, candidates: Tensor) -> Tensor:
    """Assign each layout instance to a distinct candidate box by IoU.

    Instances are processed in descending order of their best IoU; each takes
    its highest-IoU candidate among those still unused (ties toward the lower
    candidate index).  Returns a LongTensor of candidate indices, one per
    instance, in the original instance order.
    """
    gt = layout.boxes_tensor(torch.float64) if isinstance(layout, Layout) else layout
    k = gt.shape[0]
    if k == 0:
        return torch.zeros((0,), dtype=torch.long)
    n = candidates.shape[0]
    if n == 0:
        raise ValueError("cannot match against an empty candidate set")
    if k > n:
        raise ValueError(f"{k} instances but only {n} candidates")
    ious = pairwise_iou(gt.to(candidates.dtype), candidates)
    best = ious.max(dim=1).values
    instance_order = sorted(range(k), key=lambda i: (-float(best[i]), i))
    assigned = torch.full((k,), -1, dtype=torch.long)
    used = torch.zeros(n, dtype=torch.bool)
    for i in instance_order:
        row = ious[i].clone()
        row[used] = -1.0
        j = int(torch.argmax(row))
        assigned[i] = j
        used[j] = True
    return assigned


def scale_bucket(box: Box) -> int:
    """Size bucket 1..5 of a box: reference area nearest in log scale."""
    area = box.area
    if area <= 0:
        raise ValueError(f"zero-area box has no scale bucket: {box}")
    log_area = math.log(area)
    diffs = [abs(log_area - math.log(s * s)) for s in SCALE_REFERENCE_SIDES]
    return 1 + diffs.index(min(diffs))


@dataclass
class AnchorGrid:
    """Dense anchor set with provenance, one row per detector output slot.

    Row order is level-major, then cell row, cell column, then scale index,
    matching how the detection heads flatten their convolutional outputs.
    """

    boxes: Tensor  # [N, 4] corner form, float32
    level: Tensor  # [N] feature level index
    cell_y: Tensor  # [N] cell row within the level
    cell_x: Tensor  # [N] cell column within the level
    scale_idx: Tensor  # [N] index into the level's size list
    strides: tuple[int, ...]
    sizes: tuple[tuple[float, ...], ...]
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __post_init__(self):
        prov = torch.stack([self.level, self.cell_y, self.cell_x, self.scale_idx], dim=1)
        if torch.unique(prov, dim=0).shape[0] != prov.shape[0]:
            raise ValueError("anchor provenance indices are not unique")

    def box_at(self, index: int) -> Box:
        x0, y0, x1, y1 = self.boxes[index].tolist()
        return Box(x0, y0, x1, y1)

    def index_of(self, level: int, cell_y: int, cell_x: int, scale_idx: int) -> int:
        """Flat row index of the anchor with the given provenance."""
        hit = (
            (self.level == level)
            & (self.cell_y == cell_y)
            & (self.cell_x == cell_x)
            & (self.scale_idx == scale_idx)
        )
        rows = torch.nonzero(hit, as_tuple=False).flatten()
        if rows.numel() != 1:
            raise KeyError(f"no anchor at level={level} cell=({cell_y}, {cell_x}) scale={scale_idx}")
        return int(rows[0])

    def bucket_of(self, index: int) -> int:
        return scale_bucket(self.box_at(index))

    def covered_buckets(self) -> list[int]:
        sides = {s for level_sizes in self.sizes for s in level_sizes}
        return sorted({scale_bucket(Box(0, 0, s, s)) for s in sides})

    def indices_in_bucket(self, bucket: int) -> Tensor:
        sides = self.boxes[:, 2] - self.boxes[:, 0]
        areas = sides * (self.boxes[:, 3] - self.boxes[:, 1])
        log_area = torch.log(areas.clamp(min=_EPS))
        refs = torch.tensor([math.log(s * s) for s in SCALE_REFERENCE_SIDES])
        buckets = torch.argmin((log_area[:, None] - refs[None, :]).abs(), dim=1) + 1
        return torch.nonzero(buckets == bucket, as_tuple=False).flatten()


def build_anchor_grid(
    image_size: tuple[int, int],
    strides: tuple[int, ...],
    sizes: tuple[tuple[float, ...], ...],
) -> AnchorGrid:
    """Lay square anchors of the given sizes on each feature level.

    ``strides[i]`` is the pixel stride of level ``i`` and ``sizes[i]`` its
    anchor side lengths; anchors are centered on the level's cell centers.
    """
    if len(strides) != len(sizes):
        raise ValueError("strides and sizes must align per level")
    h, w = image_size
    all_boxes, all_level, all_cy, all_cx, all_scale = [], [], [], [], []
    for lvl, (stride, level_sizes) in enumerate(zip(strides, sizes)):
        gh, gw = h // stride, w // stride
        ys = (torch.arange(gh, dtype=torch.float32) + 0.5) * stride
        xs = (torch.arange(gw, dtype=torch.float32) + 0.5) * stride
        for iy in range(gh):
            for ix in range(gw):
                for si, side in enumerate(level_sizes):
                    cx, cy = xs[ix], ys[iy]
                    all_boxes.append(
                        [cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2]
                    )
                    all_level.append(lvl)
                    all_cy.append(iy)
                    all_cx.append(ix)
                    all_scale.append(si)
    return AnchorGrid(
        boxes=torch.tensor(all_boxes, dtype=torch.float32),
        level=torch.tensor(all_level, dtype=torch.long),
        cell_y=torch.tensor(all_cy, dtype=torch.long),
        cell_x=torch.tensor(all_cx, dtype=torch.long),
        scale_idx=torch.tensor(all_scale, dtype=torch.long),
        strides=tuple(strides),
        sizes=tuple(tuple(s) for s in sizes),
        image_size=(h, w),
    )


def layouts_equal_exact(pred: Layout, target: Layout, tol: float = 1e-4) -> bool:
    """Set equality of layouts: categories exact, box corners within ``tol``."""
    if len(pred) != len(target):
        return False
    remaining = list(range(len(pred)))
    for t in target:
        found = None
        for j in remaining:
            p = pred[j]
            if p.category != t.category:
                continue
            diff = max(
                abs(a - b) for a, b in zip(p.box.to_xyxy(), t.box.to_xyxy())
            )
            if diff <= tol:
                found = j
                break
        if found is None:
            return False
        remaining.remove(found)
    return True


def match_report(pred: Layout, target: Layout, iou_thresh: float = 0.5) -> dict:
    """Greedy one-to-one class-aware matching of predictions to targets.

    Returns per-instance matched IoUs (0.0 where unmatched), the recall at
    ``iou_thresh``, and the number of unmatched predictions ("extras").
    """
    matched_iou = [0.0] * len(target)
    used = set()
    # highest-scoring predictions claim targets first
    pred_order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, i))
    for pi in pred_order:
        p = pred[pi]
        best_j, best_v = None, 0.0
        for j, t in enumerate(target):
            if j in used or t.category != p.category:
                continue
            v = iou(p.box, t.box)
            if v > best_v:
                best_j, best_v = j, v
        if best_j is not None and best_v >= iou_thresh:
            used.add(best_j)
            matched_iou[best_j] = best_v
    recalled = sum(1 for v in matched_iou if v >= iou_thresh)
    recall = recalled / len(target) if len(target) else 1.0
    extras = len(pred) - len(used)
    return {
        "matched_iou": matched_iou,
        "recall": recall,
        "extras": extras,
        "success": recall == 1.0 and extras == 0,
    }
