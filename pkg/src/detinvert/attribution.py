"""Saliency methods adapted to detector heads.

Attributions target a single scalar output of a matched candidate row:
either the class logit of a chosen category or one raw box-delta component
(dx, dy, dw, dh, pre-decode).  Three methods are provided: a channel-weighted
activation map with RoI truncation, a per-location activation-gradient norm
product, and a preserving-mask optimization under an area budget.  All calls
are pure reads: model weights and the input image are never modified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import Box, decode_boxes, match_by_iou
from .models import TwoStageDetector

__all__ = [
    "REG_COMPONENTS",
    "AttributionRequest",
    "SaliencyResult",
    "ExtremalResult",
    "grad_cam",
    "norm_grad",
    "extremal_mask",
    "binarize_top_fraction",
    "mask_iou",
    "separation_report",
]

REG_COMPONENTS = ("dx", "dy", "dw", "dh")
_VALID_TARGETS = ("cls",) + REG_COMPONENTS


@dataclass
class AttributionRequest:
    """One attribution query: which instance, which scalar, where to look.

    ``box`` identifies the instance; its candidate row is re-matched on the
    forward pass exactly as the projection step matches targets.  ``target``
    is "cls" for the class logit of ``category`` or a delta component name.
    ``layer`` picks from ``model.attribution_layers()`` (first entry when
    omitted).  ``mask`` is the instance's pixel mask, needed only by the
    preserving-mask method.
    """

    model: object
    image: Tensor
    box: Box
    category: int
    target: str = "cls"
    layer: str | None = None
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.target not in _VALID_TARGETS:
            raise ValueError(
                f"unknown target {self.target!r}; valid: {_VALID_TARGETS}"
            )
        c = self.model.config.num_categories
        if not 0 <= self.category < c:
            raise ValueError(f"category {self.category} outside [0, {c})")
        h, w = self.model.config.image_size
        if self.image.shape != (3, h, w):
            raise ValueError(
                f"expected a 3x{h}x{w} image, got {tuple(self.image.shape)}"
            )
        if self.mask is not None and self.mask.shape != (h, w):
            raise ValueError(
                f"mask shape {self.mask.shape} does not match the image {(h, w)}"
            )


@dataclass
class SaliencyResult:
    map: Tensor  # [H, W], >= 0, max 1.0 unless all-zero
    layer: str
    target: str
    row: int
    roi: Box | None = None  # region the map was truncated to, if any
    all_zero: bool = False


@dataclass
class ExtremalResult:
    mask: Tensor  # [H, W] in [0, 1]
    area_target: float  # requested fraction of image pixels
    area_achieved: float
    value_original: float  # scalar on the untouched image
    value_masked: float  # scalar on the blended image
    retention: float | None  # probability ratio; class targets only
    success: bool  # area within 10% of the budget
    trace: list[dict] = field(default_factory=list)
    row: int = -1


def _resolve_layer(model, name: str | None):
    layers = model.attribution_layers()
    if name is None:
        name = next(iter(layers))
    if name not in layers:
        raise ValueError(
            f"unknown attribution layer {name!r}; available: {sorted(layers)}"
        )
    return name, layers[name]


def _reg_index(target: str) -> int:
    return REG_COMPONENTS.index(target)


def _forward_with_capture(model, image: Tensor, layer):
    """One forward pass recording the chosen layer's output."""
    captured: list[Tensor] = []

    def hook(_mod, _inp, out):
        captured.append(out)

    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            if isinstance(model, TwoStageDetector):
                raw = model.forward_raw(image, with_masks=False)
            else:
                raw = model.forward_raw(image)
    finally:
        handle.remove()
    if not captured:
        raise RuntimeError("the chosen layer never ran during the forward pass")
    return raw, captured[0]


def _references(model, raw) -> Tensor:
    return raw.proposals if isinstance(model, TwoStageDetector) else raw.anchors


def _match_row(model, raw, box: Box) -> int:
    cand = decode_boxes(
        raw.reg_deltas.detach().double(), _references(model, raw).detach().double()
    )
    gt = torch.tensor([box.to_xyxy()], dtype=torch.float64)
    return int(match_by_iou(gt, cand)[0])


def _target_scalar(raw, row: int, category: int, target: str) -> Tensor:
    if target == "cls":
        return raw.cls_logits[row, category]
    return raw.reg_deltas[row, _reg_index(target)]


def _upsample_full(cam: Tensor, image_size: tuple[int, int]) -> Tensor:
    return F.interpolate(
        cam[None, None], size=image_size, mode="bilinear", align_corners=False
    )[0, 0]


def _paste_roi(cam: Tensor, roi: Tensor, image_size: tuple[int, int]) -> Tensor:
    """Upsample a per-RoI map into its box region on a zero canvas."""
    h, w = image_size
    x0 = int(max(0, np.floor(float(roi[0]))))
    y0 = int(max(0, np.floor(float(roi[1]))))
    x1 = int(min(w, np.ceil(float(roi[2]))))
    y1 = int(min(h, np.ceil(float(roi[3]))))
    canvas = torch.zeros((h, w), dtype=cam.dtype)
    if x1 - x0 < 1 or y1 - y0 < 1:
        return canvas
    patch = F.interpolate(
        cam[None, None], size=(y1 - y0, x1 - x0), mode="bilinear", align_corners=False
    )[0, 0]
    canvas[y0:y1, x0:x1] = patch
    return canvas


def _layer_maps(model, request: AttributionRequest):
    """Shared front half: activations, gradients, row, and paste geometry."""
    name, layer = _resolve_layer(model, request.layer)
    raw, act = _forward_with_capture(model, request.image, layer)
    row = _match_row(model, raw, request.box)
    scalar = _target_scalar(raw, row, request.category, request.target)
    (grad,) = torch.autograd.grad(scalar, act, allow_unused=True)
    per_roi = isinstance(model, TwoStageDetector) and layer is model.roi_tap
    if per_roi:
        roi_box = _references(model, raw)[row].detach()
        a, g = act[row], None if grad is None else grad[row]
    else:
        roi_box = None
        a, g = act[0], None if grad is None else grad[0]
    return name, row, a.detach(), g, roi_box


def _finalize(sal: Tensor, model, roi_box, name: str, row: int,
              request: AttributionRequest, truncate_to: Box | None) -> SaliencyResult:
    image_size = model.config.image_size
    if roi_box is not None:
        full = _paste_roi(sal, roi_box, image_size)
    else:
        full = _upsample_full(sal, image_size)
    roi = None
    if truncate_to is not None:
        keep = torch.zeros_like(full, dtype=torch.bool)
        h, w = image_size
        x0 = int(max(0, np.floor(truncate_to.x_min)))
        y0 = int(max(0, np.floor(truncate_to.y_min)))
        x1 = int(min(w, np.ceil(truncate_to.x_max)))
        y1 = int(min(h, np.ceil(truncate_to.y_max)))
        keep[y0:y1, x0:x1] = True
        full = torch.where(keep, full, torch.zeros_like(full))
        roi = truncate_to
    peak = float(full.max())
    if peak <= 0.0:
        return SaliencyResult(
            map=torch.zeros_like(full), layer=name, target=request.target,
            row=row, roi=roi, all_zero=True,
        )
    return SaliencyResult(
        map=full / peak, layer=name, target=request.target, row=row, roi=roi
    )


def grad_cam(request: AttributionRequest, truncate: bool = True) -> SaliencyResult:
    """Rectified channel-weighted activation map for the requested scalar.

    Channel weights are the spatially pooled gradients of the target at the
    chosen layer.  By default the map is zeroed outside the instance's box;
    pass ``truncate=False`` to keep the whole map (used e.g. to measure how
    much mass falls inside the box in the first place).
    """
    model = request.model
    name, row, a, g, roi_box = _layer_maps(model, request)
    if g is None or not bool((g != 0).any()):
        warnings.warn("target gradient is identically zero; returning an empty map")
        h, w = model.config.image_size
        return SaliencyResult(
            map=torch.zeros((h, w)), layer=name, target=request.target, row=row,
            roi=request.box if truncate else None, all_zero=True,
        )
    weights = g.detach().mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * a).sum(dim=0))
    return _finalize(
        cam, model, roi_box, name, row, request,
        truncate_to=request.box if truncate else None,
    )


def norm_grad(request: AttributionRequest) -> SaliencyResult:
    """Per-location product of activation norm and gradient norm.

    Nonnegative by construction and reported without RoI truncation.
    """
    model = request.model
    name, row, a, g, roi_box = _layer_maps(model, request)
    if g is None or not bool((g != 0).any()):
        warnings.warn("target gradient is identically zero; returning an empty map")
        h, w = model.config.image_size
        return SaliencyResult(
            map=torch.zeros((h, w)), layer=name, target=request.target, row=row,
            all_zero=True,
        )
    sal = a.norm(dim=0) * g.detach().norm(dim=0)
    return _finalize(sal, model, roi_box, name, row, request, truncate_to=None)


def _strong_blur(image: Tensor, factor: int = 8) -> Tensor:
    """Structure-destroying baseline: heavy downsample then bilinear upsample."""
    h, w = image.shape[-2:]
    small = F.avg_pool2d(image[None], kernel_size=factor, stride=factor)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)[0]


def _pinned_value_fn(model, image: Tensor, box: Box, category: int, target: str):
    """Scalar/value closure with the candidate row frozen from the clean image.

    For the two-stage model the proposal set is pinned too, so the scalar
    refers to the same RoI no matter how the blended image changes.
    """
    two_stage = isinstance(model, TwoStageDetector)
    with torch.no_grad():
        raw0 = (
            model.forward_raw(image, with_masks=False)
            if two_stage else model.forward_raw(image)
        )
    row = _match_row(model, raw0, box)
    if two_stage:
        proposals = raw0.proposals.detach().clone()

        def fn(img: Tensor) -> tuple[Tensor, Tensor]:
            feat = model.features(img.unsqueeze(0))
            cls_logits, reg_deltas, _ = model.roi_forward(feat, proposals, with_masks=False)
            scalar = (
                cls_logits[row, category] if target == "cls"
                else reg_deltas[row, _reg_index(target)]
            )
            value = (
                torch.softmax(cls_logits[row], dim=-1)[category]
                if target == "cls" else scalar
            )
            return scalar, value

    else:

        def fn(img: Tensor) -> tuple[Tensor, Tensor]:
            raw = model.forward_raw(img)
            scalar = _target_scalar(raw, row, category, target)
            value = torch.sigmoid(scalar) if target == "cls" else scalar
            return scalar, value

    return fn, row


def _area_loss(mask_flat: Tensor, area_fraction: float) -> Tensor:
    """Push the sorted mask toward a step vector with the budgeted on-count."""
    n = mask_flat.numel()
    k = int(round(area_fraction * n))
    reference = torch.zeros(n, dtype=mask_flat.dtype)
    reference[:k] = 1.0
    ordered = torch.sort(mask_flat, descending=True).values
    return ((ordered - reference) ** 2).mean()


def extremal_mask(
    request: AttributionRequest,
    area_scale: float = 0.5,
    area_fraction: float | None = None,
    iterations: int = 400,
    lr: float = 0.15,
    area_weight: float = 5000.0,
    grid_stride: int = 2,
    tau_end: float = 0.15,
) -> ExtremalResult:
    """Optimize a preserving mask under an area budget.

    The budget defaults to ``area_scale`` times the instance's pixel-mask
    area (as a fraction of the image); ``area_fraction`` overrides it
    directly.  A low-resolution sigmoid mask blends the image with a heavily
    blurred baseline; the optimizer maximizes the target scalar while an
    annealed sorting penalty pulls the mask area onto the budget and the
    sigmoid temperature is sharpened toward ``tau_end``.  A final threshold
    calibration sets the exact area, so the optimizer decides where to
    preserve and the calibration decides how much.  Success means the
    achieved area lies within 10% of the budget; a miss is reported through
    the flag and trace, not an exception.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    model = request.model
    h, w = model.config.image_size
    if area_fraction is None:
        if request.mask is None:
            raise ValueError("need an instance mask or an explicit area_fraction")
        area_fraction = float(area_scale) * float(request.mask.sum()) / float(h * w)
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError(f"area budget {area_fraction:.4g} outside (0, 1]")

    image = request.image.detach().clone()
    baseline = _strong_blur(image)
    fn, row = _pinned_value_fn(
        model, image, request.box, request.category, request.target
    )
    with torch.no_grad():
        _, value0 = fn(image)
    value0 = float(value0)

    def upsampled(shift: float, tau: float) -> Tensor:
        m = torch.sigmoid((logits - shift) / tau)
        return F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)[0, 0]

    logits = torch.zeros(
        (1, 1, (h + grid_stride - 1) // grid_stride, (w + grid_stride - 1) // grid_stride),
        requires_grad=True,
    )
    opt = torch.optim.Adam([logits], lr=lr)
    trace: list[dict] = []
    for t in range(1, iterations + 1):
        opt.zero_grad()
        tau = 1.0 + (tau_end - 1.0) * min(1.0, t / (0.5 * iterations))
        full = upsampled(0.0, tau)
        blended = full * image + (1.0 - full) * baseline
        scalar, value = fn(blended)
        # ramp the area pressure so early steps can find what to preserve
        ramp = area_weight * min(1.0, t / (0.3 * iterations))
        loss = -scalar + ramp * _area_loss(full.flatten(), area_fraction)
        loss.backward()
        opt.step()
        trace.append({
            "iteration": t,
            "value": float(value.detach()),
            "area": float(full.detach().mean()),
            "loss": float(loss.detach()),
        })

    with torch.no_grad():
        # area is continuous and decreasing in the shift; bisect onto the budget
        lo, hi = -30.0, 30.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if float(upsampled(mid, tau_end).mean()) > area_fraction:
                lo = mid
            else:
                hi = mid
        full = upsampled(0.5 * (lo + hi), tau_end)
        blended = full * image + (1.0 - full) * baseline
        _, value1 = fn(blended)
    value1 = float(value1)
    area = float(full.mean())
    retention = None
    if request.target == "cls":
        retention = value1 / max(value0, 1e-12)
    return ExtremalResult(
        mask=full.detach(),
        area_target=area_fraction,
        area_achieved=area,
        value_original=value0,
        value_masked=value1,
        retention=retention,
        success=abs(area - area_fraction) <= 0.1 * area_fraction,
        trace=trace,
        row=row,
    )


def binarize_top_fraction(saliency: Tensor, fraction: float = 0.2) -> Tensor:
    """Boolean mask of the ``fraction`` highest-valued pixels (count-based).

    Only strictly positive pixels are eligible, so maps with small support
    (e.g. pasted RoI maps) never pad their selection with zero background.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    flat = saliency.flatten()
    positive = int((flat > 0).sum())
    if positive == 0:
        return torch.zeros_like(saliency, dtype=torch.bool)
    k = min(max(1, int(round(fraction * flat.numel()))), positive)
    idx = torch.topk(flat, k).indices
    out = torch.zeros_like(flat, dtype=torch.bool)
    out[idx] = True
    return out.view_as(saliency)


def mask_iou(a: Tensor, b: Tensor) -> float:
    """IoU of two boolean maps; empty-vs-empty counts as 0."""
    inter = float((a & b).sum())
    union = float((a | b).sum())
    return inter / union if union > 0 else 0.0


def separation_report(
    model,
    samples,
    n_instances: int = 50,
    fraction: float = 0.2,
    layer: str = "trunk_last",
    baseline_layer: str = "trunk_prev",
    component: str = "dx",
) -> dict:
    """Quantify whether class and regression attributions occupy different pixels.

    For each instance, three full (untruncated) maps are computed per method:
    the class target and one delta component at ``layer``, plus the class
    target again at ``baseline_layer``.  Top-``fraction`` binarized IoU between
    class and delta maps is the separation score; IoU between the two class
    maps across layers is the nuisance baseline (same target, different
    depth).  Separation holds when the mean class-vs-delta IoU falls strictly
    below the class-vs-class baseline.

    The comparison is meaningful only where both targets' gradients reach the
    layer through spatially distinct paths; use the single-stage trunk for a
    well-posed baseline (the two-stage trunk sees both targets through one
    RoI crop, collapsing the contrast).

    ``samples`` yields (image, layout) pairs; instances are consumed in order
    until ``n_instances`` are scored.
    """
    if component not in REG_COMPONENTS:
        raise ValueError(f"component must be one of {REG_COMPONENTS}, got {component!r}")
    methods = {"grad_cam": lambda r: grad_cam(r, truncate=False), "norm_grad": norm_grad}
    scores = {m: {"separation": [], "baseline": []} for m in methods}
    done = 0
    for image, layout in samples:
        if done >= n_instances:
            break
        for inst in layout.instances:
            if done >= n_instances:
                break
            maps = {}
            for m, run in methods.items():
                maps[m] = {
                    "cls": run(AttributionRequest(
                        model, image, inst.box, inst.category, "cls", layer=layer)),
                    "reg": run(AttributionRequest(
                        model, image, inst.box, inst.category, component, layer=layer)),
                    "cls_other": run(AttributionRequest(
                        model, image, inst.box, inst.category, "cls", layer=baseline_layer)),
                }
            for m in methods:
                b = {k: binarize_top_fraction(v.map, fraction) for k, v in maps[m].items()}
                scores[m]["separation"].append(mask_iou(b["cls"], b["reg"]))
                scores[m]["baseline"].append(mask_iou(b["cls"], b["cls_other"]))
            done += 1
    report: dict = {"n": done, "layer": layer, "baseline_layer": baseline_layer,
                    "component": component, "fraction": fraction, "methods": {}}
    for m in methods:
        sep = scores[m]["separation"]
        base = scores[m]["baseline"]
        mean_sep = sum(sep) / len(sep) if sep else 0.0
        mean_base = sum(base) / len(base) if base else 0.0
        report["methods"][m] = {
            "separation_iou": mean_sep,
            "baseline_iou": mean_base,
            "separated": mean_sep < mean_base,
            "per_instance_separation": sep,
            "per_instance_baseline": base,
        }
    return report
