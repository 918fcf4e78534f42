"""Layout inversion: synthesize images a detector decodes as a chosen layout.

The core loop alternates two updates.  The pseudo-target update rewrites the
detector's current raw outputs into the nearest feasible tensor: rows matched
to target instances receive confident class targets and exact encoded boxes,
unmatched rows that would survive post-processing receive background targets,
and every other row is left untouched.  Post-processing the pseudo-targets
therefore reproduces the target layout by construction, every iteration.  The
image update then takes one SGD step on the pixels, pulling the raw outputs
toward the pseudo-targets under image regularizers (total variation, a
centered p-norm, periodic blur, and sub-pixel jitter).

Variants: :func:`invert_layout_two_stage` applies the same scheme to both
stages of a two-stage detector (proposal coordinates are never differentiated
through), :func:`invert_disentangled` restricts the distance to a subset of
the per-candidate output heads, and :func:`visualize_single_anchor` drops the
layout constraint entirely and maximizes one candidate's class probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import (
    _DELTA_CLAMP,
    Box,
    Layout,
    decode_boxes,
    encode_boxes,
    elementwise_giou,
    match_by_iou,
    match_report,
    pairwise_iou,
)
from .models import (
    SingleStageRaw,
    TwoStageDetector,
    TwoStageRaw,
    check_nms_feasible,
)

FREE = -1
SUPPRESSED = -2
LOSS_TERMS = ("cls", "reg", "mask")

# Minimum target box side. Keeps encoded size ratios far inside the decode
# clamp for every anchor and proposal the models can produce, so projected
# boxes always decode back exactly.
MIN_TARGET_SIDE = 1.0


@dataclass(frozen=True)
class InversionConfig:
    """Knobs for the alternating optimization.

    ``step_size`` is the initial pixel learning rate; with ``cosine_decay``
    it anneals to zero over ``iterations``.  ``lambda_dist`` scales the whole
    output-matching distance against the image regularizers; ``lambda_cls``,
    ``lambda_reg`` and ``lambda_mask`` weight the per-head terms inside it,
    and ``lambda_stage1`` / ``lambda_stage2`` weight the two stages of a
    two-stage model.  ``loss_subset`` picks which per-candidate heads are
    constrained (two-stage: stage-2 heads; the stage-1 term always uses its
    objectness and box losses).
    """

    iterations: int = 1000
    step_size: float = 0.5
    cosine_decay: bool = True
    lambda_dist: float = 1.0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_mask: float = 1.0
    lambda_stage1: float = 1.0
    lambda_stage2: float = 1.0
    tv_weight: float = 1e-3
    norm_weight: float = 1e-4
    norm_power: int = 6
    blur_every: int = 10
    blur_sigma: float = 0.3
    jitter: int = 2
    init: str = "noise"
    fg_prob: float = 0.97
    bg_prob: float = 0.03
    seed: int = 0
    loss_subset: tuple[str, ...] = ("cls", "reg")
    anneal_frac: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.anneal_frac <= 1.0:
            raise ValueError(f"anneal_frac must be in [0, 1], got {self.anneal_frac}")
        for name in (
            "step_size", "lambda_dist", "lambda_cls", "lambda_reg", "lambda_mask",
            "lambda_stage1", "lambda_stage2", "tv_weight", "norm_weight",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.jitter < 0 or self.blur_every < 0:
            raise ValueError("jitter and blur_every must be >= 0")
        if self.init not in ("noise", "gray"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if not (0.0 < self.bg_prob < self.fg_prob < 1.0):
            raise ValueError(
                f"need 0 < bg_prob < fg_prob < 1, got {self.bg_prob}, {self.fg_prob}"
            )
        subset = tuple(self.loss_subset)
        if not subset:
            raise ValueError("loss_subset must be nonempty")
        bad = [t for t in subset if t not in LOSS_TERMS]
        if bad:
            raise ValueError(f"unknown loss terms {bad}; valid: {LOSS_TERMS}")


@dataclass
class PseudoTargets:
    """Feasible shadow of one stage's raw outputs.

    ``roles`` tags each row: the matched instance id (>= 0), ``SUPPRESSED``
    (would survive post-processing but matches nothing, classification pushed
    to background), or ``FREE`` (bit-equal copy of the raw row).  Decoding
    ``reg_targets`` at the matched rows against ``references`` reproduces
    ``target_boxes`` exactly.
    """

    cls_targets: Tensor
    reg_targets: Tensor
    roles: Tensor
    references: Tensor
    target_boxes: Tensor
    target_categories: Tensor
    matched_rows: Tensor

    @property
    def num_suppressed(self) -> int:
        return int((self.roles == SUPPRESSED).sum())


@dataclass
class TwoStagePseudoTargets:
    """Pseudo-targets for both stages of a two-stage detector.

    ``stage1`` is class-agnostic (objectness plus boxes, no suppression);
    ``stage2`` shadows the per-candidate head.  ``mask_targets`` holds one
    binary crop per instance, aligned with ``stage2.matched_rows``, when the
    mask term is active.
    """

    stage1: PseudoTargets
    stage2: PseudoTargets
    mask_targets: Tensor | None = None


@dataclass
class InversionResult:
    """Final image plus the per-iteration record of one inversion run.

    Iterating yields ``(image, trace)`` so results unpack like a pair.
    ``detections`` is the detector's reading of the final image; ``match``
    compares it with the target layout.  ``metrics`` carries per-term scores
    for disentangled runs; ``prob`` and ``anchor_index`` are set by
    single-candidate visualizations.
    """

    image: Tensor
    trace: list[dict]
    success: bool
    detections: Layout
    config: InversionConfig
    match: dict | None = None
    early_exit: bool = False
    metrics: dict | None = None
    prob: float | None = None
    anchor_index: int | None = None
    anchor_box: Box | None = None

    def __iter__(self):
        yield self.image
        yield self.trace


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _validate_target(target: Layout, model) -> None:
    c = model.config.num_categories
    h, w = model.config.image_size
    for i, inst in enumerate(target.instances):
        if not 0 <= inst.category < c:
            raise ValueError(
                f"instance {i}: category {inst.category} outside [0, {c})"
            )
        b = inst.box
        if min(b.width, b.height) < MIN_TARGET_SIDE:
            raise ValueError(
                f"instance {i}: box sides must be >= {MIN_TARGET_SIDE}px, got {b}"
            )
        if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
            raise ValueError(f"instance {i}: box {b} outside image {(w, h)}")
    check_nms_feasible(target, model.post.nms_iou)


def _instance_tensors(target: Layout) -> tuple[Tensor, Tensor]:
    k = len(target.instances)
    if k == 0:
        return torch.zeros((0, 4), dtype=torch.float64), torch.zeros((0,), dtype=torch.long)
    boxes = target.boxes_tensor(torch.float64)
    cats = torch.tensor([inst.category for inst in target.instances], dtype=torch.long)
    return boxes, cats


def _checked_encode(gt: Tensor, references: Tensor) -> Tensor:
    deltas = encode_boxes(gt, references)
    wide = deltas[:, 2:].abs().max()
    if float(wide) > _DELTA_CLAMP:
        raise ValueError(
            "target box size ratio exceeds the decode clamp "
            f"(|log ratio| {float(wide):.2f} > {_DELTA_CLAMP}); no exact projection exists"
        )
    return deltas


def _single_projection(
    raw: SingleStageRaw, target: Layout, model, fg: float, bg: float
) -> PseudoTargets:
    cls_t = raw.cls_logits.detach().clone()
    reg_t = raw.reg_deltas.detach().clone()
    n = cls_t.shape[0]
    roles = torch.full((n,), FREE, dtype=torch.long)
    anchors = raw.anchors.detach()
    gt, cats = _instance_tensors(target)
    rows = torch.zeros((0,), dtype=torch.long)
    if gt.shape[0]:
        candidates = decode_boxes(reg_t.double(), anchors.double())
        rows = match_by_iou(gt, candidates)
        deltas = _checked_encode(gt, anchors.double()[rows])
        for i, r in enumerate(rows.tolist()):
            cls_t[r, :] = _logit(bg)
            cls_t[r, int(cats[i])] = _logit(fg)
            reg_t[r] = deltas[i].to(reg_t.dtype)
            roles[r] = i
    probs = torch.sigmoid(raw.cls_logits.detach().double())
    hot = (probs >= model.post.score_thresh).any(dim=1) & (roles == FREE)
    cls_t[hot] = _logit(bg)
    roles[hot] = SUPPRESSED
    return PseudoTargets(
        cls_targets=cls_t,
        reg_targets=reg_t,
        roles=roles,
        references=anchors.clone(),
        target_boxes=gt,
        target_categories=cats,
        matched_rows=rows,
    )


def _log_distribution(num_entries: int, hot: int, fg: float) -> Tensor:
    row = torch.full((num_entries,), math.log((1.0 - fg) / (num_entries - 1)))
    row[hot] = math.log(fg)
    return row


def _two_projection(
    raw: TwoStageRaw, target: Layout, model, fg: float, bg: float,
    with_mask_targets: bool,
) -> TwoStagePseudoTargets:
    c = model.config.num_categories
    gt, cats = _instance_tensors(target)
    k = gt.shape[0]

    # stage 1: class-agnostic; pull the best candidate rows onto the target
    # boxes so the proposal set learns to cover them. Nothing is suppressed;
    # surplus proposals are harmless.
    rpn_cls = raw.rpn_logits.detach().clone()
    rpn_reg = raw.rpn_deltas.detach().clone()
    anchors = raw.anchors.detach()
    n1 = rpn_cls.shape[0]
    roles1 = torch.full((n1,), FREE, dtype=torch.long)
    rows1 = torch.zeros((0,), dtype=torch.long)
    if k:
        candidates1 = decode_boxes(rpn_reg.double(), anchors.double())
        rows1 = match_by_iou(gt, candidates1)
        deltas1 = _checked_encode(gt, anchors.double()[rows1])
        for i, r in enumerate(rows1.tolist()):
            rpn_cls[r] = _logit(fg)
            rpn_reg[r] = deltas1[i].to(rpn_reg.dtype)
            roles1[r] = i
    stage1 = PseudoTargets(
        cls_targets=rpn_cls,
        reg_targets=rpn_reg,
        roles=roles1,
        references=anchors.clone(),
        target_boxes=gt,
        target_categories=cats,
        matched_rows=rows1,
    )

    # stage 2 against the proposals this forward pass actually used
    cls_t = raw.cls_logits.detach().clone()
    reg_t = raw.reg_deltas.detach().clone()
    proposals = raw.proposals.detach()
    r_n = cls_t.shape[0]
    roles2 = torch.full((r_n,), FREE, dtype=torch.long)
    rows2 = torch.zeros((0,), dtype=torch.long)
    if k:
        candidates2 = decode_boxes(reg_t.double(), proposals.double())
        rows2 = match_by_iou(gt, candidates2)
        deltas2 = _checked_encode(gt, proposals.double()[rows2])
        for i, r in enumerate(rows2.tolist()):
            cls_t[r] = _log_distribution(c + 1, int(cats[i]), fg).to(cls_t.dtype)
            reg_t[r] = deltas2[i].to(reg_t.dtype)
            roles2[r] = i
    probs = torch.softmax(raw.cls_logits.detach().double(), dim=-1)[:, :c]
    hot = (probs >= model.post.score_thresh).any(dim=1) & (roles2 == FREE)
    cls_t[hot] = _log_distribution(c + 1, c, fg).to(cls_t.dtype)
    roles2[hot] = SUPPRESSED
    stage2 = PseudoTargets(
        cls_targets=cls_t,
        reg_targets=reg_t,
        roles=roles2,
        references=proposals.clone(),
        target_boxes=gt,
        target_categories=cats,
        matched_rows=rows2,
    )

    mask_targets = None
    if with_mask_targets and k:
        mask_targets = _mask_crops(target, proposals[rows2], model.config.mask_size)
    return TwoStagePseudoTargets(stage1=stage1, stage2=stage2, mask_targets=mask_targets)


def _mask_crops(target: Layout, boxes: Tensor, mask_size: int) -> Tensor:
    """Binary GT-mask crops under the given boxes, one per instance."""
    from torchvision.ops import roi_align

    crops = []
    for inst, box in zip(target.instances, boxes):
        if inst.mask is None:
            raise ValueError("mask term requested but a target instance has no mask")
        full = torch.from_numpy(np.ascontiguousarray(inst.mask)).float()[None, None]
        roi = torch.cat([torch.zeros(1, 1), box.float()[None]], dim=1)
        crop = roi_align(full, roi, (mask_size, mask_size), spatial_scale=1.0, aligned=True)
        crops.append((crop[0] >= 0.5).float())
    return torch.stack(crops)


def update_pseudo_targets(
    raw, target: Layout, model, config: InversionConfig | None = None
):
    """Project raw outputs onto the feasible set for ``target``.

    Matched rows get confident class targets and exactly encoded boxes,
    unmatched rows that would clear the score threshold get background class
    targets, and all other rows are copied bit-for-bit.  The result is
    verified: post-processing it must reproduce ``target`` with categories
    exact and box coordinates within 1e-4, else a RuntimeError is raised.
    """
    config = config or InversionConfig()
    _validate_target(target, model)
    fg, bg = config.fg_prob, config.bg_prob
    if fg <= model.post.score_thresh:
        raise ValueError(
            f"fg_prob {fg} must exceed the score threshold {model.post.score_thresh}"
        )
    if isinstance(raw, SingleStageRaw):
        pseudo = _single_projection(raw, target, model, fg, bg)
    elif isinstance(raw, TwoStageRaw):
        pseudo = _two_projection(
            raw, target, model, fg, bg,
            with_mask_targets="mask" in config.loss_subset and raw.mask_logits is not None,
        )
    else:
        raise TypeError(f"unsupported raw outputs: {type(raw).__name__}")
    err = _projection_error(model, raw, pseudo, target)
    if err is not None:
        raise RuntimeError(f"projection failed to reproduce the target layout: {err}")
    return pseudo


def pseudo_as_raw(raw, pseudo):
    """Assemble raw-output tensors whose values are the pseudo-targets."""
    if isinstance(pseudo, PseudoTargets):
        return SingleStageRaw(
            cls_logits=pseudo.cls_targets,
            reg_deltas=pseudo.reg_targets,
            anchors=pseudo.references,
        )
    return TwoStageRaw(
        rpn_logits=pseudo.stage1.cls_targets,
        rpn_deltas=pseudo.stage1.reg_targets,
        anchors=pseudo.stage1.references,
        proposals=pseudo.stage2.references,
        cls_logits=pseudo.stage2.cls_targets,
        reg_deltas=pseudo.stage2.reg_targets,
        mask_logits=None,
    )


def _projection_error(model, raw, pseudo, target: Layout, tol: float = 1e-4) -> str | None:
    """Check postprocess(pseudo) == target; return a description or None."""
    with torch.no_grad():
        got = model.postprocess(pseudo_as_raw(raw, pseudo))
    k = len(target.instances)
    if len(got.instances) != k:
        return f"{len(got.instances)} detections for {k} target instances"
    used = [False] * k
    for det in got.instances:
        best, best_err = -1, float("inf")
        for i, inst in enumerate(target.instances):
            if used[i] or inst.category != det.category:
                continue
            err = max(
                abs(det.box.x_min - inst.box.x_min), abs(det.box.y_min - inst.box.y_min),
                abs(det.box.x_max - inst.box.x_max), abs(det.box.y_max - inst.box.y_max),
            )
            if err < best_err:
                best, best_err = i, err
        if best < 0 or best_err > tol:
            return (
                f"detection {det.category}@{det.box} has no target within {tol}"
                f" (closest off by {best_err:.2e})" if best >= 0 else
                f"detection category {det.category} not in target"
            )
        used[best] = True
    return None


def _term_weight(config: InversionConfig, term: str) -> float:
    if term not in config.loss_subset:
        return 0.0
    return getattr(config, f"lambda_{term}")


def _zero(like: Tensor) -> Tensor:
    return torch.zeros((), dtype=like.dtype)


def _stage_terms(
    cls_logits: Tensor,
    reg_deltas: Tensor,
    references: Tensor,
    pseudo: PseudoTargets,
    binary: bool,
) -> dict[str, Tensor]:
    """Cross-entropy on constrained rows plus GIoU loss on matched rows."""
    sel = pseudo.roles != FREE
    terms: dict[str, Tensor] = {}
    if sel.any():
        if binary:
            # per-row sum over class entries, mean over rows: keeps the pull on
            # a matched class independent of the category count and consistent
            # with the softmax stage's per-row cross-entropy
            target_probs = torch.sigmoid(pseudo.cls_targets[sel]).to(cls_logits.dtype)
            per_entry = F.binary_cross_entropy_with_logits(
                cls_logits[sel], target_probs, reduction="none"
            )
            terms["cls"] = (
                per_entry.sum(-1).mean() if per_entry.dim() > 1 else per_entry.mean()
            )
        else:
            target_dist = torch.softmax(pseudo.cls_targets[sel], dim=-1).to(cls_logits.dtype)
            terms["cls"] = -(target_dist * F.log_softmax(cls_logits[sel], dim=-1)).sum(-1).mean()
    else:
        terms["cls"] = _zero(cls_logits)
    rows = pseudo.matched_rows
    if rows.numel():
        pred = decode_boxes(reg_deltas[rows], references[rows])
        tgt = pseudo.target_boxes.to(pred.dtype)
        terms["reg"] = (1.0 - elementwise_giou(pred, tgt)).mean()
        with torch.no_grad():
            ious = pairwise_iou(pred.detach().double(), tgt.double()).diagonal()
        terms["iou"] = ious
    else:
        terms["reg"] = _zero(cls_logits)
        terms["iou"] = torch.zeros((0,), dtype=torch.float64)
    return terms


def distance(raw, pseudo, config: InversionConfig | None = None) -> Tensor:
    """Weighted output-matching distance between raw outputs and pseudo-targets."""
    config = config or InversionConfig()
    return _distance_parts(raw, pseudo, config)["distance"]


def _distance_parts(raw, pseudo, config: InversionConfig) -> dict:
    if isinstance(pseudo, PseudoTargets):
        terms = _stage_terms(
            raw.cls_logits, raw.reg_deltas, raw.anchors, pseudo, binary=True
        )
        total = (
            _term_weight(config, "cls") * terms["cls"]
            + _term_weight(config, "reg") * terms["reg"]
        )
        return {"distance": total, "cls": terms["cls"], "reg": terms["reg"],
                "iou": terms["iou"]}

    s1 = _stage_terms(
        raw.rpn_logits, raw.rpn_deltas, raw.anchors, pseudo.stage1, binary=True
    )
    s2 = _stage_terms(
        raw.cls_logits, raw.reg_deltas, raw.proposals, pseudo.stage2, binary=False
    )
    # stage 1 keeps both of its terms regardless of the subset; the subset
    # selects which per-candidate heads are constrained.
    d1 = config.lambda_cls * s1["cls"] + config.lambda_reg * s1["reg"]
    d2 = _term_weight(config, "cls") * s2["cls"] + _term_weight(config, "reg") * s2["reg"]
    mask_term = _zero(raw.cls_logits)
    if "mask" in config.loss_subset and pseudo.mask_targets is not None:
        rows = pseudo.stage2.matched_rows
        if raw.mask_logits is None:
            raise ValueError("mask term active but raw outputs carry no mask logits")
        mask_term = F.binary_cross_entropy_with_logits(
            raw.mask_logits[rows],
            pseudo.mask_targets.to(raw.mask_logits.dtype),
            reduction="mean",
        )
        d2 = d2 + config.lambda_mask * mask_term
    total = config.lambda_stage1 * d1 + config.lambda_stage2 * d2
    return {
        "distance": total, "d1": d1, "d2": d2, "cls": s2["cls"], "reg": s2["reg"],
        "mask": mask_term, "iou": s2["iou"], "rpn_cls": s1["cls"], "rpn_reg": s1["reg"],
    }


def regularize(image: Tensor, config: InversionConfig | None = None) -> Tensor:
    """Image prior: smooth squared total variation plus a centered p-norm."""
    config = config or InversionConfig()
    dx = image[..., :, 1:] - image[..., :, :-1]
    dy = image[..., 1:, :] - image[..., :-1, :]
    tv = (dx * dx).mean() + (dy * dy).mean()
    centered = (image - 0.5).abs() ** config.norm_power
    return config.tv_weight * tv + config.norm_weight * centered.mean()


def gaussian_blur(image: Tensor, sigma: float) -> Tensor:
    """3-tap separable Gaussian with reflect padding; keeps dtype and shape."""
    k = torch.exp(
        -torch.tensor([1.0, 0.0, 1.0], dtype=image.dtype) / (2.0 * sigma * sigma)
    )
    k = k / k.sum()
    c = image.shape[0]
    kx = k.view(1, 1, 1, 3).expand(c, 1, 1, 3)
    ky = k.view(1, 1, 3, 1).expand(c, 1, 3, 1)
    x = image.unsqueeze(0)
    x = F.conv2d(F.pad(x, (1, 1, 0, 0), mode="reflect"), kx, groups=c)
    x = F.conv2d(F.pad(x, (0, 0, 1, 1), mode="reflect"), ky, groups=c)
    return x.squeeze(0)


def transform_image(image: Tensor, step_index: int, config: InversionConfig) -> Tensor:
    """Periodic pixel-space smoothing: blur at step k, 2k, ... else identity."""
    if config.blur_every and step_index > 0 and step_index % config.blur_every == 0:
        return gaussian_blur(image, config.blur_sigma)
    return image


def _lr_at(config: InversionConfig, step_index: int) -> float:
    if not config.cosine_decay or config.iterations <= 1:
        return config.step_size
    frac = (step_index - 1) / config.iterations
    return config.step_size * 0.5 * (1.0 + math.cos(math.pi * frac))


def _draw_jitter(config: InversionConfig, gen: torch.Generator) -> tuple[int, int]:
    if config.jitter <= 0:
        return 0, 0
    j = config.jitter
    shift = torch.randint(-j, j + 1, (2,), generator=gen)
    return int(shift[0]), int(shift[1])


def _forward(model, image: Tensor, with_masks: bool):
    if isinstance(model, TwoStageDetector):
        return model.forward_raw(image, with_masks=with_masks)
    return model.forward_raw(image)


def image_step(
    image: Tensor,
    pseudo,
    model,
    config: InversionConfig,
    step_index: int = 1,
    gen: torch.Generator | None = None,
) -> tuple[Tensor, dict]:
    """One pixel-space SGD step against fixed pseudo-targets.

    Returns the updated image (clamped to [0, 1]) and a stats dict.  The
    forward pass sees a jittered view of the image when jitter is enabled;
    the regularizer always sees the unshifted pixels.
    """
    lr = _lr_at(config, step_index)
    img = image.detach().clone().requires_grad_(True)
    dy, dx = _draw_jitter(config, gen) if gen is not None else (0, 0)
    view = torch.roll(img, shifts=(dy, dx), dims=(-2, -1)) if (dy or dx) else img
    with_masks = (
        "mask" in config.loss_subset
        and isinstance(pseudo, TwoStagePseudoTargets)
        and pseudo.mask_targets is not None
    )
    raw = _forward(model, view, with_masks)
    parts = _distance_parts(raw, pseudo, config)
    reg = regularize(img, config)
    objective = config.lambda_dist * parts["distance"] + reg
    (grad,) = torch.autograd.grad(objective, img)
    if not torch.isfinite(grad).all():
        raise RuntimeError(
            f"non-finite pixel gradient at step {step_index}: "
            f"distance={float(parts['distance'].detach()):.4g} "
            f"regularizer={float(reg.detach()):.4g}"
        )
    out = (img.detach() - lr * grad).clamp_(0.0, 1.0)
    stats = {
        "d": float(parts["distance"].detach()),
        "r": float(reg.detach()),
        "total": float(objective.detach()),
        "lr": lr,
    }
    return out, stats


def _init_image(config: InversionConfig, image_size: tuple[int, int],
                gen: torch.Generator) -> Tensor:
    h, w = image_size
    if config.init == "gray":
        return torch.full((3, h, w), 0.5)
    return 0.4 + 0.2 * torch.rand((3, h, w), generator=gen)


def _detect_kwargs(model) -> dict:
    if isinstance(model, TwoStageDetector):
        return {"with_masks": False}
    return {}


def _coverage(proposals: Tensor, gt: Tensor) -> float:
    if gt.shape[0] == 0:
        return 1.0
    ious = pairwise_iou(gt, proposals.double())
    return float((ious.max(dim=1).values >= 0.5).double().mean())


def _run_inversion(model, target: Layout, config: InversionConfig,
                   init_image: Tensor | None) -> InversionResult:
    _validate_target(target, model)
    two_stage = isinstance(model, TwoStageDetector)
    gen = torch.Generator().manual_seed(config.seed)
    image = (
        init_image.detach().clone()
        if init_image is not None
        else _init_image(config, model.config.image_size, gen)
    )

    with torch.no_grad():
        initial = model.detect(image, **_detect_kwargs(model))
    report = match_report(initial, target)
    if report["success"]:
        return InversionResult(
            image=image,
            trace=[{"iteration": 0, "d": 0.0, "r": float(regularize(image, config)),
                    "iou": [float(v) for v in report["matched_iou"]]}],
            success=True,
            detections=initial,
            config=config,
            match=report,
            early_exit=True,
        )

    trace: list[dict] = []
    # the last anneal_frac of the schedule runs without jitter or blur so the
    # suppression and box refinement act on the exact image being scored
    cutoff = config.iterations - int(config.anneal_frac * config.iterations)
    for t in range(1, config.iterations + 1):
        lr = _lr_at(config, t)
        img = image.detach().clone().requires_grad_(True)
        dy, dx = _draw_jitter(config, gen) if t <= cutoff else (0, 0)
        view = torch.roll(img, shifts=(dy, dx), dims=(-2, -1)) if (dy or dx) else img
        raw = _forward(model, view, with_masks="mask" in config.loss_subset and two_stage)
        pseudo = update_pseudo_targets(raw, target, model, config)
        parts = _distance_parts(raw, pseudo, config)
        reg = regularize(img, config)
        objective = config.lambda_dist * parts["distance"] + reg
        (grad,) = torch.autograd.grad(objective, img)
        if not torch.isfinite(grad).all():
            raise RuntimeError(
                f"non-finite pixel gradient at iteration {t}: "
                f"distance={float(parts['distance'].detach()):.4g} "
                f"regularizer={float(reg.detach()):.4g}"
            )
        image = (img.detach() - lr * grad).clamp_(0.0, 1.0)
        if t <= cutoff:
            image = transform_image(image, t, config)
        row = {
            "iteration": t,
            "d": float(parts["distance"].detach()),
            "r": float(reg.detach()),
            "total": float(objective.detach()),
            "lr": lr,
            "iou": [float(v) for v in parts["iou"]],
            "suppressed": (
                pseudo.num_suppressed if isinstance(pseudo, PseudoTargets)
                else pseudo.stage2.num_suppressed
            ),
        }
        if two_stage:
            row["coverage"] = _coverage(raw.proposals.detach(), pseudo.stage2.target_boxes)
            row["d1"] = float(parts["d1"].detach())
            row["d2"] = float(parts["d2"].detach())
        trace.append(row)

    with torch.no_grad():
        final = model.detect(image, **_detect_kwargs(model))
    report = match_report(final, target)
    return InversionResult(
        image=image,
        trace=trace,
        success=report["success"],
        detections=final,
        config=config,
        match=report,
    )


def invert_layout(
    model, target: Layout, config: InversionConfig | None = None,
    init_image: Tensor | None = None,
) -> InversionResult:
    """Synthesize an image the model detects as exactly ``target``.

    Runs the alternating loop for ``config.iterations`` steps and re-detects
    the final image; ``success`` means every target instance was recovered at
    IoU >= 0.5 with the right category and nothing extra fired.  If the
    initial image already satisfies the target the loop is skipped and the
    result is flagged ``early_exit``.  Non-convergence is reported through
    the flag and trace, not an exception.
    """
    return _run_inversion(model, target, config or InversionConfig(), init_image)


def invert_layout_two_stage(
    model, target: Layout, config: InversionConfig | None = None,
    init_image: Tensor | None = None,
) -> InversionResult:
    """Two-stage variant of :func:`invert_layout`.

    Both stages are projected and pulled: stage 1 toward proposing the target
    boxes (coverage of the targets by the live proposal set is recorded per
    iteration), stage 2 toward classifying and regressing them exactly.
    """
    if not isinstance(model, TwoStageDetector):
        raise TypeError("invert_layout_two_stage requires a two-stage detector")
    return _run_inversion(model, target, config or InversionConfig(), init_image)


def _disentangled_metrics(model, image: Tensor, target: Layout,
                          config: InversionConfig) -> dict:
    """Per-term scores of the final image at the freshly matched rows."""
    subset = config.loss_subset
    with torch.no_grad():
        raw = _forward(model, image, with_masks="mask" in subset)
        pseudo = update_pseudo_targets(raw, target, model, config)
        if isinstance(pseudo, TwoStagePseudoTargets):
            rows = pseudo.stage2.matched_rows
            probs = torch.softmax(raw.cls_logits.double(), dim=-1)
            cats = pseudo.stage2.target_categories
            cls_probs = probs[rows, cats]
            boxes = decode_boxes(raw.reg_deltas.double()[rows], raw.proposals.double()[rows])
            gt = pseudo.stage2.target_boxes
        else:
            rows = pseudo.matched_rows
            probs = torch.sigmoid(raw.cls_logits.double())
            cats = pseudo.target_categories
            cls_probs = probs[rows, cats]
            boxes = decode_boxes(raw.reg_deltas.double()[rows], raw.anchors.double()[rows])
            gt = pseudo.target_boxes
        ious = pairwise_iou(boxes, gt).diagonal() if rows.numel() else torch.zeros(0)
        metrics = {
            "cls_probs": [float(v) for v in cls_probs],
            "box_ious": [float(v) for v in ious],
            "mean_cls_prob": float(cls_probs.mean()) if rows.numel() else 1.0,
            "mean_box_iou": float(ious.mean()) if rows.numel() else 1.0,
        }
        if "mask" in subset:
            pred = torch.sigmoid(raw.mask_logits[rows]) >= 0.5
            tgt = pseudo.mask_targets >= 0.5
            inter = (pred & tgt).flatten(1).sum(dim=1).double()
            union = (pred | tgt).flatten(1).sum(dim=1).double().clamp(min=1.0)
            mious = inter / union
            metrics["mask_ious"] = [float(v) for v in mious]
            metrics["mean_mask_iou"] = float(mious.mean()) if rows.numel() else 1.0
    return metrics


def invert_disentangled(
    model, target: Layout, loss_subset, config: InversionConfig | None = None,
    init_image: Tensor | None = None,
) -> InversionResult:
    """Invert with only a subset of the per-candidate heads constrained.

    Success uses per-term criteria on the matched rows of the final image:
    mean class probability >= 0.9 when "cls" is active, mean decoded-box IoU
    >= 0.5 when "reg" is active, mean mask IoU >= 0.7 when "mask" is active.
    The mask term needs a two-stage model with a mask head and target masks.
    """
    subset = tuple(loss_subset)
    config = replace(config or InversionConfig(), loss_subset=subset)
    if "mask" in subset:
        if not isinstance(model, TwoStageDetector) or model.mask_head is None:
            raise ValueError("mask term requires a two-stage detector with a mask head")
        if any(inst.mask is None for inst in target.instances):
            raise ValueError("mask term requires target instances with masks")
    result = _run_inversion(model, target, config, init_image)
    metrics = _disentangled_metrics(model, result.image, target, config)
    ok = True
    if "cls" in subset:
        ok = ok and metrics["mean_cls_prob"] >= 0.9
    if "reg" in subset:
        ok = ok and metrics["mean_box_iou"] >= 0.5
    if "mask" in subset:
        ok = ok and metrics["mean_mask_iou"] >= 0.7
    result.metrics = metrics
    result.success = ok
    return result


def _anchor_objective(model, view: Tensor, anchor_index: int, category: int):
    """Negative log-probability of one candidate's class, plus its raw row."""
    if isinstance(model, TwoStageDetector):
        feat = model.features(view.unsqueeze(0))
        proposal = model.anchor_boxes[anchor_index : anchor_index + 1].to(view.dtype)
        cls_logits, reg_deltas, _ = model.roi_forward(feat, proposal, with_masks=False)
        logp = F.log_softmax(cls_logits[0], dim=-1)[category]
        return -logp, cls_logits[0], reg_deltas[0], proposal[0]
    raw = model.forward_raw(view)
    logit = raw.cls_logits[anchor_index, category]
    return F.softplus(-logit), raw.cls_logits[anchor_index], raw.reg_deltas[anchor_index], \
        raw.anchors[anchor_index]


def _anchor_prob(model, image: Tensor, anchor_index: int, category: int) -> float:
    with torch.no_grad():
        loss, *_ = _anchor_objective(model, image, anchor_index, category)
    return float(torch.exp(-loss.double()))


def visualize_single_anchor(
    model, anchor_index: int, category: int,
    config: InversionConfig | None = None,
) -> InversionResult:
    """Maximize one candidate's class probability with everything else free.

    For a single-stage model the candidate is a dense anchor row; for a
    two-stage model it is the RoI formed by treating that anchor's box as a
    fixed proposal.  Success means the final clean-image probability reaches
    0.99; otherwise the best-effort image is returned with ``success`` False.
    The full detection readout of the final image is attached so emergent
    context can be analyzed.
    """
    config = config or InversionConfig()
    n = model.anchor_boxes.shape[0]
    if not 0 <= anchor_index < n:
        raise ValueError(f"anchor index {anchor_index} outside [0, {n})")
    if not 0 <= category < model.config.num_categories:
        raise ValueError(
            f"category {category} outside [0, {model.config.num_categories})"
        )
    gen = torch.Generator().manual_seed(config.seed)
    image = _init_image(config, model.config.image_size, gen)
    trace: list[dict] = []
    cutoff = config.iterations - int(config.anneal_frac * config.iterations)
    for t in range(1, config.iterations + 1):
        lr = _lr_at(config, t)
        img = image.detach().clone().requires_grad_(True)
        dy, dx = _draw_jitter(config, gen) if t <= cutoff else (0, 0)
        view = torch.roll(img, shifts=(dy, dx), dims=(-2, -1)) if (dy or dx) else img
        loss, *_ = _anchor_objective(model, view, anchor_index, category)
        reg = regularize(img, config)
        objective = loss + reg
        (grad,) = torch.autograd.grad(objective, img)
        if not torch.isfinite(grad).all():
            raise RuntimeError(
                f"non-finite pixel gradient at step {t}: loss={float(loss.detach()):.4g}"
            )
        image = (img.detach() - lr * grad).clamp_(0.0, 1.0)
        if t <= cutoff:
            image = transform_image(image, t, config)
        trace.append({
            "iteration": t, "prob": float(torch.exp(-loss.detach().double())),
            "r": float(reg.detach()), "lr": lr,
        })

    prob = _anchor_prob(model, image, anchor_index, category)
    with torch.no_grad():
        detections = model.detect(image, **_detect_kwargs(model))
        _, _, reg_row, ref = _anchor_objective(model, image, anchor_index, category)
        decoded = decode_boxes(reg_row[None].double(), ref[None].double())[0]
    ref_box = Box(*(float(v) for v in decoded))
    return InversionResult(
        image=image,
        trace=trace,
        success=prob >= 0.99,
        detections=detections,
        config=config,
        prob=prob,
        anchor_index=anchor_index,
        anchor_box=ref_box,
    )
