"""Training loops for both detector kinds on generated shape scenes.

Supervision follows the usual dense-detector recipe: anchors (or RoIs) are
assigned to ground-truth instances by IoU, classification uses a focal
sigmoid loss (single stage, stage-1 objectness) or softmax cross entropy
with a background class (stage 2), and box regression minimizes one minus
the generalized IoU of decoded boxes.  Batch order is a pure function of
``(seed, epoch)``, so resumed runs retrace the interrupted schedule exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from torchvision.ops import roi_align

from .geometry import Layout, decode_boxes, elementwise_giou, pairwise_iou
from .models import save_checkpoint

__all__ = [
    "TrainConfig",
    "assign_boxes",
    "focal_loss",
    "single_stage_losses",
    "two_stage_losses",
    "train_detector",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    reg_weight: float = 1.0
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    mask_weight: float = 1.0
    grad_clip: float = 10.0
    val_every: int = 0  # 0 disables; otherwise box AP on val every k epochs


def assign_boxes(
    candidates: Tensor, gt_boxes: Tensor, pos_iou: float, neg_iou: float
) -> tuple[Tensor, Tensor]:
    """IoU assignment of candidate boxes to ground truth.

    Returns ``(matched, labels)``: the matched ground-truth index per
    candidate (-1 when unmatched) and labels 1 / 0 / -1 for positive,
    negative, and ignored.  Every ground truth additionally claims its
    single best-IoU candidate even below the positive threshold.
    """
    n = candidates.shape[0]
    if gt_boxes.shape[0] == 0:
        return torch.full((n,), -1, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    ious = pairwise_iou(candidates.double(), gt_boxes.double())
    best, arg = ious.max(dim=1)
    labels = torch.where(
        best >= pos_iou,
        torch.ones(n, dtype=torch.long),
        torch.where(best < neg_iou, torch.zeros(n, dtype=torch.long), torch.full((n,), -1)),
    )
    matched = torch.where(labels == 1, arg, torch.full((n,), -1))
    for k in range(gt_boxes.shape[0]):
        col = ious[:, k]
        row = int(torch.nonzero(col == col.max(), as_tuple=False)[0])
        labels[row] = 1
        matched[row] = k
    return matched, labels


def focal_loss(logits: Tensor, targets: Tensor, alpha: float, gamma: float) -> Tensor:
    """Summed focal sigmoid loss; ``targets`` is a 0/1 tensor of logits' shape."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    pt = p * targets + (1.0 - p) * (1.0 - targets)
    w = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (w * (1.0 - pt).pow(gamma) * ce).sum()


def single_stage_losses(model, images: Tensor, layouts: list[Layout], config: TrainConfig) -> dict:
    cls_b, reg_b = model(images)
    anchors = model.anchor_boxes
    n, c = cls_b.shape[1:]
    cls_sum = images.new_zeros(())
    reg_sum = images.new_zeros(())
    num_pos = 0
    for i, layout in enumerate(layouts):
        gt = layout.boxes_tensor()
        matched, labels = assign_boxes(anchors, gt, config.pos_iou, config.neg_iou)
        valid = labels >= 0
        pos = labels == 1
        targets = torch.zeros(n, c, dtype=cls_b.dtype)
        if bool(pos.any()):
            cats = torch.tensor(layout.categories, dtype=torch.long)
            targets[pos, cats[matched[pos]]] = 1.0
            decoded = decode_boxes(reg_b[i][pos], anchors[pos])
            reg_sum = reg_sum + (1.0 - elementwise_giou(decoded, gt[matched[pos]])).sum()
            num_pos += int(pos.sum())
        cls_sum = cls_sum + focal_loss(
            cls_b[i][valid], targets[valid], config.focal_alpha, config.focal_gamma
        )
    norm = max(num_pos, 1)
    cls = cls_sum / norm
    reg = config.reg_weight * reg_sum / norm
    return {"cls": cls, "reg": reg, "total": cls + reg, "num_pos": num_pos}


def _mask_targets(layout: Layout, rows: Tensor, props: Tensor, matched: Tensor, size: int) -> Tensor:
    stack = np.stack([layout[int(matched[r])].mask for r in rows.tolist()])
    masks = torch.from_numpy(stack.astype(np.float32))[:, None]
    rois = torch.cat([torch.arange(len(rows), dtype=torch.float32)[:, None], props[rows]], dim=1)
    crops = roi_align(masks, rois, (size, size), spatial_scale=1.0, sampling_ratio=2, aligned=True)
    return (crops[:, 0] >= 0.5).float()


def two_stage_losses(model, images: Tensor, layouts: list[Layout], config: TrainConfig) -> dict:
    feat = model.features(images)
    rpn_logits_b, rpn_deltas_b = model.stage1(feat)
    anchors = model.anchor_boxes
    n_cat = model.config.num_categories
    with_masks = model.mask_head is not None and config.mask_weight > 0
    msize = model.config.mask_size
    rpn_cls = images.new_zeros(())
    rpn_reg = images.new_zeros(())
    rpn_pos = 0
    props_per_image: list[Tensor] = []
    target_chunks: list[Tensor] = []
    fg_gt_boxes: list[Tensor] = []
    fg_masks: list[Tensor] = []  # one (possibly empty) chunk per image, row-aligned
    for i, layout in enumerate(layouts):
        gt = layout.boxes_tensor()
        matched, labels = assign_boxes(anchors, gt, config.rpn_pos_iou, config.rpn_neg_iou)
        valid = labels >= 0
        pos = labels == 1
        rpn_cls = rpn_cls + focal_loss(
            rpn_logits_b[i][valid], (labels[valid] == 1).float(), config.focal_alpha, config.focal_gamma
        )
        if bool(pos.any()):
            decoded = decode_boxes(rpn_deltas_b[i][pos], anchors[pos])
            rpn_reg = rpn_reg + (1.0 - elementwise_giou(decoded, gt[matched[pos]])).sum()
            rpn_pos += int(pos.sum())

        props = model.propose(rpn_logits_b[i], rpn_deltas_b[i])
        mask_chunk = torch.zeros((0, msize, msize))
        if len(layout):
            # ground-truth boxes join the RoI batch so stage 2 always sees
            # well-placed positives, even early in training
            props = torch.cat([props, gt])
            ious = pairwise_iou(props.double(), gt.double())
            best, arg = ious.max(dim=1)
            fg = best >= config.roi_fg_iou
            cats = torch.tensor(layout.categories, dtype=torch.long)
            target_chunks.append(torch.where(fg, cats[arg], torch.full_like(arg, n_cat)))
            rows = torch.nonzero(fg, as_tuple=False).flatten()
            fg_gt_boxes.append(gt[arg[rows]])
            if with_masks and rows.numel():
                mask_chunk = _mask_targets(layout, rows, props, arg, msize)
        else:
            target_chunks.append(torch.full((props.shape[0],), n_cat, dtype=torch.long))
            fg_gt_boxes.append(torch.zeros((0, 4)))
        fg_masks.append(mask_chunk)
        props_per_image.append(props)

    cls_logits, reg_deltas, _ = model.roi_forward(feat, props_per_image, with_masks=False)
    props_cat = torch.cat(props_per_image)
    roi_targets = torch.cat(target_chunks)
    fg_all = roi_targets < n_cat
    roi_cls = F.cross_entropy(cls_logits, roi_targets, reduction="sum") / max(len(roi_targets), 1)
    roi_fg = int(fg_all.sum())
    roi_reg = images.new_zeros(())
    mask = images.new_zeros(())
    if roi_fg:
        rows = torch.nonzero(fg_all, as_tuple=False).flatten()
        decoded = decode_boxes(reg_deltas[rows], props_cat[rows])
        gt_cat = torch.cat(fg_gt_boxes)
        roi_reg = config.reg_weight * (1.0 - elementwise_giou(decoded, gt_cat)).sum() / roi_fg
        if with_masks:
            # cap the per-step mask batch; plenty of signal, much cheaper.
            # every image keeps a (possibly empty) slot so roi batch indices
            # stay aligned with the feature batch
            budget = 16
            fg_props, kept_targets = [], []
            for p, t, m_t in zip(props_per_image, target_chunks, fg_masks):
                take = min(m_t.shape[0], max(budget, 0))
                fg_props.append(p[t < n_cat][:take])
                kept_targets.append(m_t[:take])
                budget -= take
            mask_t = torch.cat(kept_targets)
            if mask_t.shape[0]:
                mask_logits = model.mask_forward(feat, fg_props)
                mask = config.mask_weight * F.binary_cross_entropy_with_logits(
                    mask_logits[:, 0], mask_t, reduction="mean"
                )
    rpn_cls = rpn_cls / max(rpn_pos, 1)
    rpn_reg = rpn_reg / max(rpn_pos, 1)
    total = rpn_cls + rpn_reg + roi_cls + roi_reg + mask
    return {
        "rpn_cls": rpn_cls,
        "rpn_reg": rpn_reg,
        "cls": roi_cls,
        "reg": roi_reg,
        "mask": mask,
        "total": total,
        "num_pos": roi_fg,
    }


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_detector(
    model,
    dataset,
    config: TrainConfig,
    val_dataset=None,
    checkpoint_path=None,
    resume_state: dict | None = None,
    verbose: bool = False,
) -> list[dict]:
    """Train in place; returns one log dict per epoch.

    ``resume_state`` is the ``train_state`` payload of a checkpoint written
    by this function; model weights must already be loaded.  Training then
    continues at the recorded epoch with the optimizer state restored, and
    losses match an uninterrupted run.
    """
    loss_fn = single_stage_losses if model.kind == "single_stage" else two_stage_losses
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    start_epoch = 0
    if resume_state is not None:
        opt.load_state_dict(resume_state["optimizer"])
        start_epoch = int(resume_state["epoch_next"])
    model.train()
    logs: list[dict] = []
    n = len(dataset)
    for epoch in range(start_epoch, config.epochs):
        order = _epoch_order(config.seed, epoch, n)
        sums: dict[str, float] = {}
        steps = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            pairs = [dataset[int(i)] for i in idx]
            images = torch.stack([p[0] for p in pairs])
            layouts = [p[1] for p in pairs]
            losses = loss_fn(model, images, layouts, config)
            if not torch.isfinite(losses["total"]):
                detail = {
                    k: float(v.detach()) for k, v in losses.items() if isinstance(v, Tensor)
                }
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {steps}: {detail}"
                )
            opt.zero_grad()
            losses["total"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + (float(v.detach()) if isinstance(v, Tensor) else float(v))
            steps += 1
        log = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if val_dataset is not None and config.val_every and (epoch + 1) % config.val_every == 0:
            log["val_ap50"] = _val_ap50(model, val_dataset)
            model.train()
        logs.append(log)
        if verbose:
            line = " ".join(f"{k}={v:.4f}" if k != "epoch" else f"epoch={v}" for k, v in log.items())
            print(line, flush=True)
        if checkpoint_path is not None:
            save_checkpoint(
                model,
                checkpoint_path,
                train_state={
                    "epoch_next": epoch + 1,
                    "optimizer": opt.state_dict(),
                    "train_config": asdict(config),
                    "logs": logs,
                },
            )
    model.eval()
    return logs


def _val_ap50(model, val_dataset) -> float:
    from .analysis import evaluate_ap  # late import, analysis depends on models

    model.eval()
    kwargs = {"with_masks": False} if model.kind == "two_stage" else {}
    preds, gts = [], []
    for i in range(len(val_dataset)):
        image, gt = val_dataset[i]
        with torch.no_grad():
            preds.append(model.detect(image, score_thresh=0.05, **kwargs))
        gts.append(gt)
    return evaluate_ap(preds, gts, iou_thresholds=(0.5,))["ap"]
