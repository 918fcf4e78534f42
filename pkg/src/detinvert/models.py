"""Toy single-stage and two-stage detectors with separable dense/post stages.

Both architectures expose the same decomposition the rest of the package
leans on: a differentiable map from pixels to a fixed-size tensor of dense
outputs (``forward_raw``), and a non-differentiable post-processing pipeline
(``postprocess``: decode, score threshold, per-class NMS, cap) turning those
outputs into a layout.  ``detect`` is exactly their composition.

The two-stage model additionally exposes its internal cut points: stage-1
dense outputs on anchors, proposal selection, and stage-2 per-RoI outputs
computed by differentiable region pooling over trunk features.  Gradients
flow to pixels through RoI features; proposal coordinates are detached.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import nms as _fast_nms
from torchvision.ops import roi_align

from .data import CATEGORY_NAMES
from .geometry import (
    AnchorGrid,
    Box,
    Detection,
    Layout,
    build_anchor_grid,
    decode_boxes,
    encode_boxes,
    match_by_iou,
    nms,
    pairwise_iou,
)

__all__ = [
    "PostprocessConfig",
    "SingleStageConfig",
    "TwoStageConfig",
    "SingleStageRaw",
    "TwoStageRaw",
    "SingleStageDetector",
    "TwoStageDetector",
    "make_detector",
    "check_nms_feasible",
    "raw_from_layout",
    "paste_roi_mask",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class PostprocessConfig:
    score_thresh: float = 0.5
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass(frozen=True)
class SingleStageConfig:
    num_categories: int = 8
    image_size: tuple[int, int] = (128, 128)
    strides: tuple[int, ...] = (8, 16)
    anchor_sizes: tuple[tuple[float, ...], ...] = ((12.0, 20.0, 32.0), (48.0, 72.0, 104.0))


@dataclass(frozen=True)
class TwoStageConfig:
    num_categories: int = 8
    image_size: tuple[int, int] = (128, 128)
    rpn_stride: int = 8
    rpn_sizes: tuple[float, ...] = (14.0, 26.0, 48.0)
    pre_nms_top_n: int = 256
    post_nms_top_n: int = 32
    proposal_nms_iou: float = 0.7
    roi_size: int = 7
    mask_size: int = 28
    with_masks: bool = True


@dataclass
class SingleStageRaw:
    """Dense per-anchor outputs; one row per anchor, sigmoid class logits."""

    cls_logits: Tensor  # [N, C]
    reg_deltas: Tensor  # [N, 4]
    anchors: Tensor  # [N, 4]


@dataclass
class TwoStageRaw:
    """Stage-1 per-anchor outputs plus stage-2 per-RoI outputs.

    ``cls_logits`` are softmax logits over C + 1 classes, background last.
    ``proposals`` are the RoI boxes stage 2 was evaluated on (detached).
    """

    rpn_logits: Tensor  # [N1]
    rpn_deltas: Tensor  # [N1, 4]
    anchors: Tensor  # [N1, 4]
    proposals: Tensor  # [R, 4]
    cls_logits: Tensor  # [R, C + 1]
    reg_deltas: Tensor  # [R, 4]
    mask_logits: Tensor | None  # [R, 1, M, M]


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


def _head(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(_block(cin, 64), nn.Conv2d(64, cout, 3, 1, 1))


# raw regression outputs are damped so early optimizer steps cannot push
# deltas past the decode clamp, which would zero their gradients for good
_DELTA_SCALE = 0.25


def _init_cls_bias(conv: nn.Conv2d, prior: float = 0.01) -> None:
    # start every location near the background prior so early training is stable
    nn.init.constant_(conv.bias, -float(np.log((1.0 - prior) / prior)))


def _clip_boxes(boxes: Tensor, image_size: tuple[int, int]) -> Tensor:
    h, w = image_size
    return torch.stack(
        [
            boxes[:, 0].clamp(0.0, float(w)),
            boxes[:, 1].clamp(0.0, float(h)),
            boxes[:, 2].clamp(0.0, float(w)),
            boxes[:, 3].clamp(0.0, float(h)),
        ],
        dim=-1,
    )


def _check_image(image: Tensor, image_size: tuple[int, int]) -> None:
    h, w = image_size
    if image.dim() != 3 or image.shape != (3, h, w):
        raise ValueError(f"expected a 3x{h}x{w} image tensor, got {tuple(image.shape)}")


class SingleStageDetector(nn.Module):
    """Dense detector: two feature levels, 3 square anchors per cell, sigmoid head."""

    kind = "single_stage"

    def __init__(self, config: SingleStageConfig = SingleStageConfig(), post: PostprocessConfig = PostprocessConfig()):
        super().__init__()
        self.config = config
        self.post = post
        self.stem = nn.Sequential(_block(3, 32, 2), _block(32, 48, 2), _block(48, 64, 2))
        self.level0 = _block(64, 64)
        self.down = _block(64, 96, 2)
        self.level1 = _block(96, 96)
        n_sizes = {len(s) for s in config.anchor_sizes}
        if len(n_sizes) != 1:
            raise ValueError("all levels must carry the same number of anchor sizes")
        a = n_sizes.pop()
        c = config.num_categories
        self.cls_heads = nn.ModuleList([_head(64, a * c), _head(96, a * c)])
        self.reg_heads = nn.ModuleList([_head(64, a * 4), _head(96, a * 4)])
        for h in self.cls_heads:
            _init_cls_bias(h[-1])
        self.anchor_grid: AnchorGrid = build_anchor_grid(
            config.image_size, config.strides, config.anchor_sizes
        )
        self.register_buffer("anchor_boxes", self.anchor_grid.boxes.clone(), persistent=False)
        self._anchors_per_cell = a

    def features(self, images: Tensor) -> list[Tensor]:
        x = self.stem(images)
        f0 = self.level0(x)
        f1 = self.level1(self.down(f0))
        return [f0, f1]

    def attribution_layers(self) -> dict[str, nn.Module]:
        return {"trunk_last": self.level0, "trunk_prev": self.stem[2]}

    def _flatten(self, x: Tensor, per_row: int) -> Tensor:
        b, _, h, w = x.shape
        a = self._anchors_per_cell
        return x.view(b, a, per_row, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * a, per_row)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Batched dense outputs: class logits [B, N, C] and deltas [B, N, 4]."""
        c = self.config.num_categories
        cls_levels, reg_levels = [], []
        for feat, cls_head, reg_head in zip(self.features(images), self.cls_heads, self.reg_heads):
            cls_levels.append(self._flatten(cls_head(feat), c))
            reg_levels.append(self._flatten(reg_head(feat), 4) * _DELTA_SCALE)
        return torch.cat(cls_levels, dim=1), torch.cat(reg_levels, dim=1)

    def forward_raw(self, image: Tensor) -> SingleStageRaw:
        _check_image(image, self.config.image_size)
        cls_logits, reg_deltas = self.forward(image.unsqueeze(0))
        raw = SingleStageRaw(cls_logits[0], reg_deltas[0], self.anchor_boxes.to(image.dtype))
        if not (torch.isfinite(raw.cls_logits).all() and torch.isfinite(raw.reg_deltas).all()):
            raise RuntimeError("non-finite dense outputs")
        return raw

    def postprocess(
        self,
        raw: SingleStageRaw,
        score_thresh: float | None = None,
        nms_iou: float | None = None,
        max_detections: int | None = None,
    ) -> Layout:
        st = self.post.score_thresh if score_thresh is None else score_thresh
        ni = self.post.nms_iou if nms_iou is None else nms_iou
        cap = self.post.max_detections if max_detections is None else max_detections
        probs = torch.sigmoid(raw.cls_logits.detach().double())
        boxes = _clip_boxes(
            decode_boxes(raw.reg_deltas.detach().double(), raw.anchors.double()),
            self.config.image_size,
        )
        keep = (probs >= st).nonzero(as_tuple=False)
        dets = []
        for row, cat in keep.tolist():
            x0, y0, x1, y1 = boxes[row].tolist()
            if x1 - x0 < 1e-4 or y1 - y0 < 1e-4:
                continue
            dets.append(Detection(Box(x0, y0, x1, y1), cat, float(probs[row, cat])))
        kept = nms(dets, ni)[:cap]
        return Layout(kept, image_size=self.config.image_size)

    def detect(self, image: Tensor, **overrides) -> Layout:
        return self.postprocess(self.forward_raw(image), **overrides)


class TwoStageDetector(nn.Module):
    """Proposal-then-classify detector with differentiable RoI pooling.

    Stage 1 scores class-agnostic objectness on a stride-8 anchor grid and
    refines anchor boxes into proposals; stage 2 pools trunk features over
    each proposal and emits softmax-with-background class logits plus
    class-agnostic box deltas (and optionally per-RoI masks).
    """

    kind = "two_stage"

    def __init__(self, config: TwoStageConfig = TwoStageConfig(), post: PostprocessConfig = PostprocessConfig()):
        super().__init__()
        self.config = config
        self.post = post
        self.stem = nn.Sequential(_block(3, 32, 2), _block(32, 48, 2), _block(48, 64, 2))
        self.level0 = _block(64, 64)
        a = len(config.rpn_sizes)
        self.rpn_conv = _block(64, 64)
        self.rpn_logits = nn.Conv2d(64, a, 1)
        self.rpn_deltas = nn.Conv2d(64, a * 4, 1)
        _init_cls_bias(self.rpn_logits)
        self.anchor_grid: AnchorGrid = build_anchor_grid(
            config.image_size, (config.rpn_stride,), (config.rpn_sizes,)
        )
        self.register_buffer("anchor_boxes", self.anchor_grid.boxes.clone(), persistent=False)
        self.roi_tap = nn.Identity()  # hook point: RoI feature maps pass through here
        rs = config.roi_size
        self.box_fc = nn.Sequential(
            nn.Linear(64 * rs * rs, 256), nn.ReLU(inplace=True), nn.Linear(256, 256), nn.ReLU(inplace=True)
        )
        self.cls_out = nn.Linear(256, config.num_categories + 1)
        self.reg_out = nn.Linear(256, 4)
        nn.init.zeros_(self.reg_out.bias)
        if config.with_masks:
            self.mask_head = nn.Sequential(
                _block(64, 32),
                _block(32, 32),
                nn.ConvTranspose2d(32, 32, 2, 2),
                nn.ReLU(inplace=True),
                nn.Conv2d(32, 1, 1),
            )
        else:
            self.mask_head = None
        self._anchors_per_cell = a

    def features(self, images: Tensor) -> Tensor:
        return self.level0(self.stem(images))

    def attribution_layers(self) -> dict[str, nn.Module]:
        return {"roi_features": self.roi_tap, "trunk_last": self.level0, "trunk_prev": self.stem[2]}

    def stage1(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """Dense stage-1 outputs from trunk features: [B, N1], [B, N1, 4]."""
        x = self.rpn_conv(feat)
        b, _, h, w = x.shape
        a = self._anchors_per_cell
        logits = self.rpn_logits(x).view(b, a, 1, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * a)
        deltas = self.rpn_deltas(x).view(b, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * a, 4)
        return logits, deltas * _DELTA_SCALE

    def propose(self, rpn_logits: Tensor, rpn_deltas: Tensor, top_n: int | None = None) -> Tensor:
        """Stage-1 post-processing: decoded, clipped, NMS-filtered proposal boxes.

        Operates on one image's stage-1 outputs; always detached (gradients
        do not flow through proposal coordinates).
        """
        cfg = self.config
        scores = rpn_logits.detach().double()
        boxes = _clip_boxes(
            decode_boxes(rpn_deltas.detach().double(), self.anchor_boxes.double()),
            cfg.image_size,
        )
        wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        idx = torch.nonzero(wide, as_tuple=False).flatten()
        if idx.numel() == 0:
            # degenerate start; fall back to raw anchors so stage 2 has input
            boxes = self.anchor_boxes.double()
            idx = torch.arange(boxes.shape[0])
        order = torch.argsort(scores[idx], descending=True, stable=True)[: cfg.pre_nms_top_n]
        idx = idx[order]
        keep = _fast_nms(boxes[idx], scores[idx], cfg.proposal_nms_iou)
        keep = keep[: cfg.post_nms_top_n if top_n is None else top_n]
        return boxes[idx[keep]].float()

    @staticmethod
    def _to_rois(feat: Tensor, proposals) -> tuple[Tensor, Tensor]:
        """Boxes plus batch-index column; accepts one tensor or one per image."""
        if isinstance(proposals, (list, tuple)):
            boxes = torch.cat([p.detach() for p in proposals]).to(feat.dtype)
            batch_idx = torch.cat(
                [torch.full((p.shape[0],), i, dtype=feat.dtype) for i, p in enumerate(proposals)]
            )
        else:
            boxes = proposals.detach().to(feat.dtype)
            batch_idx = torch.zeros(boxes.shape[0], dtype=feat.dtype)
        return boxes, torch.cat([batch_idx[:, None], boxes], dim=1)

    def roi_forward(
        self, feat: Tensor, proposals, with_masks: bool | None = None
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        """Stage-2 outputs for RoI boxes over trunk features.

        ``proposals`` is an [R, 4] tensor for a single image or a list of
        per-image tensors matching the feature batch.
        """
        cfg = self.config
        boxes, rois = self._to_rois(feat, proposals)
        pooled = roi_align(
            feat, rois, (cfg.roi_size, cfg.roi_size), spatial_scale=1.0 / cfg.rpn_stride,
            sampling_ratio=2, aligned=True,
        )
        pooled = self.roi_tap(pooled)
        x = self.box_fc(pooled.flatten(1))
        cls_logits = self.cls_out(x)
        reg_deltas = self.reg_out(x) * _DELTA_SCALE
        mask_logits = None
        if self.mask_head is not None and (cfg.with_masks if with_masks is None else with_masks):
            mask_logits = self.mask_forward(feat, proposals)
        return cls_logits, reg_deltas, mask_logits

    def mask_forward(self, feat: Tensor, proposals) -> Tensor:
        """Per-RoI mask logits [R, 1, M, M] for the given boxes."""
        cfg = self.config
        if self.mask_head is None:
            raise RuntimeError("model was built without a mask head")
        _, rois = self._to_rois(feat, proposals)
        m = roi_align(
            feat, rois, (cfg.mask_size // 2, cfg.mask_size // 2),
            spatial_scale=1.0 / cfg.rpn_stride, sampling_ratio=2, aligned=True,
        )
        return self.mask_head(m)

    def forward_raw(self, image: Tensor, with_masks: bool | None = None) -> TwoStageRaw:
        _check_image(image, self.config.image_size)
        feat = self.features(image.unsqueeze(0))
        logits_b, deltas_b = self.stage1(feat)
        rpn_logits, rpn_deltas = logits_b[0], deltas_b[0]
        proposals = self.propose(rpn_logits, rpn_deltas)
        cls_logits, reg_deltas, mask_logits = self.roi_forward(feat, proposals, with_masks)
        raw = TwoStageRaw(
            rpn_logits=rpn_logits,
            rpn_deltas=rpn_deltas,
            anchors=self.anchor_boxes.to(image.dtype),
            proposals=proposals,
            cls_logits=cls_logits,
            reg_deltas=reg_deltas,
            mask_logits=mask_logits,
        )
        for t in (raw.rpn_logits, raw.rpn_deltas, raw.cls_logits, raw.reg_deltas):
            if not torch.isfinite(t).all():
                raise RuntimeError("non-finite dense outputs")
        return raw

    def postprocess(
        self,
        raw: TwoStageRaw,
        score_thresh: float | None = None,
        nms_iou: float | None = None,
        max_detections: int | None = None,
    ) -> Layout:
        st = self.post.score_thresh if score_thresh is None else score_thresh
        ni = self.post.nms_iou if nms_iou is None else nms_iou
        cap = self.post.max_detections if max_detections is None else max_detections
        c = self.config.num_categories
        probs = torch.softmax(raw.cls_logits.detach().double(), dim=-1)[:, :c]
        boxes = _clip_boxes(
            decode_boxes(raw.reg_deltas.detach().double(), raw.proposals.double()),
            self.config.image_size,
        )
        mask_probs = (
            torch.sigmoid(raw.mask_logits.detach()) if raw.mask_logits is not None else None
        )
        keep = (probs >= st).nonzero(as_tuple=False)
        dets = []
        for row, cat in keep.tolist():
            x0, y0, x1, y1 = boxes[row].tolist()
            if x1 - x0 < 1e-4 or y1 - y0 < 1e-4:
                continue
            box = Box(x0, y0, x1, y1)
            mask = None
            if mask_probs is not None:
                mask = paste_roi_mask(mask_probs[row, 0], box, self.config.image_size)
            dets.append(Detection(box, cat, float(probs[row, cat]), mask=mask))
        kept = nms(dets, ni)[:cap]
        return Layout(kept, image_size=self.config.image_size)

    def detect(self, image: Tensor, with_masks: bool | None = None, **overrides) -> Layout:
        return self.postprocess(self.forward_raw(image, with_masks), **overrides)


def paste_roi_mask(prob: Tensor, box: Box, image_size: tuple[int, int]) -> np.ndarray:
    """Resize a per-RoI mask probability grid into a full-image boolean mask."""
    h, w = image_size
    out = np.zeros((h, w), dtype=bool)
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return out
    patch = F.interpolate(
        prob[None, None].float(), size=(y1 - y0, x1 - x0), mode="bilinear", align_corners=False
    )[0, 0]
    out[y0:y1, x0:x1] = (patch >= 0.5).numpy()
    return out


def make_detector(kind: str, seed: int = 0, **kwargs) -> SingleStageDetector | TwoStageDetector:
    """Deterministically initialized detector of the given kind."""
    torch.manual_seed(seed)
    if kind == "single_stage":
        cfg = SingleStageConfig(**{k: v for k, v in kwargs.items() if k != "post"})
        return SingleStageDetector(cfg, kwargs.get("post", PostprocessConfig())).eval()
    if kind == "two_stage":
        cfg = TwoStageConfig(**{k: v for k, v in kwargs.items() if k != "post"})
        return TwoStageDetector(cfg, kwargs.get("post", PostprocessConfig())).eval()
    raise ValueError(f"unknown detector kind {kind!r}")


# ---------------------------------------------------------------------------
# constructing raw outputs from a layout


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def check_nms_feasible(layout: Layout, nms_iou: float) -> None:
    """Reject layouts that per-class NMS would collapse before they appear."""
    boxes = layout.boxes_tensor(torch.float64)
    cats = layout.categories
    ious = pairwise_iou(boxes, boxes)
    for i in range(len(layout)):
        for j in range(i + 1, len(layout)):
            if cats[i] == cats[j] and float(ious[i, j]) > nms_iou:
                raise ValueError(
                    f"instances {i} and {j} share category {cats[i]} with IoU "
                    f"{float(ious[i, j]):.3f} above the NMS threshold {nms_iou}; "
                    "no detector output can contain both"
                )


def raw_from_layout(model, layout: Layout, fg: float = 0.97, bg: float = 0.02):
    """Build dense outputs whose post-processing yields exactly ``layout``.

    Each instance claims its best-IoU anchor (single-stage) or a proposal row
    (two-stage, proposals are the target boxes themselves); every other row
    is confidently background.
    """
    n_cat = model.config.num_categories
    for d in layout:
        if not 0 <= d.category < n_cat:
            raise ValueError(f"category {d.category} outside model range")
    check_nms_feasible(layout, model.post.nms_iou)
    if model.kind == "single_stage":
        n = len(model.anchor_grid)
        cls = torch.full((n, n_cat), _logit(bg))
        reg = torch.zeros((n, 4))
        if len(layout):
            rows = match_by_iou(layout, model.anchor_boxes.double())
            anchors = model.anchor_boxes[rows]
            reg[rows] = encode_boxes(layout.boxes_tensor(), anchors)
            for d, row in zip(layout, rows.tolist()):
                cls[row, d.category] = _logit(fg)
        return SingleStageRaw(cls, reg, model.anchor_boxes.clone())
    if model.kind == "two_stage":
        r = max(len(layout), 1)
        cls = torch.full((r, n_cat + 1), float(np.log(bg / n_cat)))
        cls[:, n_cat] = float(np.log(fg))
        reg = torch.zeros((r, 4))
        proposals = (
            layout.boxes_tensor() if len(layout) else torch.tensor([[0.0, 0.0, 16.0, 16.0]])
        )
        for i, d in enumerate(layout):
            cls[i] = float(np.log((1.0 - fg) / n_cat))
            cls[i, d.category] = float(np.log(fg))
        n1 = len(model.anchor_grid)
        mask_logits = None
        if model.config.with_masks:
            m = model.config.mask_size
            mask_logits = torch.full((r, 1, m, m), 4.0)
        return TwoStageRaw(
            rpn_logits=torch.full((n1,), -6.0),
            rpn_deltas=torch.zeros((n1, 4)),
            anchors=model.anchor_boxes.clone(),
            proposals=proposals,
            cls_logits=cls,
            reg_deltas=reg,
            mask_logits=mask_logits,
        )
    raise ValueError(f"unknown detector kind {model.kind!r}")


# ---------------------------------------------------------------------------
# checkpoints


def _config_hash(kind: str, model_config: dict, post: dict, categories: list[str]) -> str:
    blob = json.dumps(
        {"kind": kind, "model_config": model_config, "post": post, "categories": categories},
        sort_keys=True,
        default=list,
    ).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(model, path, train_state: dict | None = None, categories=None) -> None:
    cats = list(categories) if categories is not None else list(
        CATEGORY_NAMES[: model.config.num_categories]
    )
    model_config = asdict(model.config)
    post = asdict(model.post)
    payload = {
        "kind": model.kind,
        "model_config": model_config,
        "post": post,
        "categories": cats,
        "state_dict": model.state_dict(),
        "train_state": train_state,
        "config_hash": _config_hash(model.kind, model_config, post, cats),
    }
    torch.save(payload, path)


def _retuple(d: dict) -> dict:
    return {k: tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
            if isinstance(v, (list, tuple)) else v
            for k, v in d.items()}


def load_checkpoint(path, with_train_state: bool = False):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    expect = _config_hash(
        payload["kind"], payload["model_config"], payload["post"], payload["categories"]
    )
    if payload["config_hash"] != expect:
        raise ValueError(f"checkpoint {path}: config hash mismatch (corrupt or edited)")
    cfg = _retuple(payload["model_config"])
    post = PostprocessConfig(**payload["post"])
    if payload["kind"] == "single_stage":
        model = SingleStageDetector(SingleStageConfig(**cfg), post)
    elif payload["kind"] == "two_stage":
        model = TwoStageDetector(TwoStageConfig(**cfg), post)
    else:
        raise ValueError(f"checkpoint {path}: unknown kind {payload['kind']!r}")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if with_train_state:
        return model, payload
    return model
