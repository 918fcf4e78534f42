"""Command-line entry point: one subcommand per experiment.

Each run resolves its configuration (defaults, then a key-value config file,
then ``--set`` overrides), executes under a timestamped run directory, and
writes a manifest with the resolved config, component seeds, code version,
input hashes, output list, wall time and success flags.  ``--check`` turns a
run into a pass/fail experiment: the documented criterion is evaluated and a
miss exits with status 3.  Exit codes: 0 success, 1 configuration error,
2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import torch
from PIL import Image

from .analysis import context_frequency, evaluate_ap, scale_sweep, transfer_matrix
from .attribution import (
    AttributionRequest,
    extremal_mask,
    grad_cam,
    norm_grad,
    separation_report,
)
from .data import (
    ShapesDataset,
    category_id,
    category_name,
    generate_dataset,
    tensor_to_image,
)
from .geometry import SCALE_REFERENCE_SIDES, Layout, iou
from .inversion import (
    InversionConfig,
    invert_disentangled,
    invert_layout,
    invert_layout_two_stage,
    visualize_single_anchor,
)
from .models import TwoStageDetector, load_checkpoint, make_detector
from .runtime import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    CheckFailure,
    ConfigError,
    RunManifest,
    atomic_write_json,
    build_dataset_spec,
    code_version,
    dataset_spec_schema,
    file_sha256,
    job_count,
    layout_to_dict,
    load_layout_file,
    make_run_dir,
    map_jobs,
    output_root,
    resolve_category,
    resolve_config,
    schema_from_dataclass,
    split_seed,
    validate_layout,
)
from .training import TrainConfig, train_detector

__all__ = ["main", "COMMANDS"]

_INV_SCHEMA, _INV_DEFAULTS = schema_from_dataclass(
    InversionConfig, skip=("seed", "loss_subset")
)
_TRAIN_SCHEMA, _TRAIN_DEFAULTS = schema_from_dataclass(TrainConfig, skip=("seed",))


@dataclass
class RunContext:
    """Mutable run state the command handlers report into."""

    run_dir: Path
    jobs: int = 1
    check: bool = False
    master_seed: int = 0
    seeds: dict = field(default_factory=dict)
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    success: dict = field(default_factory=dict)

    def out_path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.run_dir / name

    def hash_input(self, path: str | Path) -> None:
        self.input_hashes[str(path)] = file_sha256(path)


# ---------------------------------------------------------------------------
# shared helpers


def _require(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"config key '{key}' is required")
    return cfg[key]


def _load_model(cfg: dict, ctx: RunContext, key: str = "checkpoint",
                required_kind: str | None = None):
    path = Path(_require(cfg, key))
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    ctx.hash_input(path)
    try:
        model = load_checkpoint(path)
    except (ValueError, RuntimeError, KeyError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}") from e
    if required_kind is not None and model.kind != required_kind:
        raise ConfigError(
            f"this command needs a {required_kind} checkpoint, got {model.kind}"
        )
    return model


def _load_split(cfg: dict, ctx: RunContext, split: str) -> ShapesDataset:
    root = Path(_require(cfg, "dataset"))
    try:
        ds = ShapesDataset(root, split)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load dataset split '{split}' from {root}: {e}") from e
    ctx.hash_input(root / f"{split}.json")
    return ds


def _inversion_config(cfg: dict, seed: int, loss_subset=None) -> InversionConfig:
    kwargs = {k: cfg[k] for k in _INV_DEFAULTS}
    if loss_subset is not None:
        kwargs["loss_subset"] = tuple(loss_subset)
    try:
        return InversionConfig(seed=seed, **kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _save_image(tensor: torch.Tensor, path: Path) -> None:
    Image.fromarray(tensor_to_image(tensor)).save(path)


def _save_gray(map2d: torch.Tensor, path: Path) -> None:
    arr = (map2d.clamp(0.0, 1.0) * 255.0).round().byte().cpu().numpy()
    Image.fromarray(arr, mode="L").save(path)


def _save_trace(trace: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        if not trace:
            return
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trace)


def _detect(model, image: torch.Tensor, score_thresh: float) -> Layout:
    kwargs = {"with_masks": False} if isinstance(model, TwoStageDetector) else {}
    with torch.no_grad():
        return model.detect(image, score_thresh=score_thresh, **kwargs)


def _instance_recall(preds: list[Layout], gts: list[Layout], thresh: float = 0.5) -> float:
    hit = total = 0
    for pred, gt in zip(preds, gts):
        for inst in gt.instances:
            total += 1
            best = 0.0
            for det in pred.instances:
                if det.category == inst.category:
                    best = max(best, iou(inst.box, det.box))
            hit += best >= thresh
    return hit / total if total else 1.0


def _center_anchor(model, bucket: int) -> int:
    """The bucket's anchor whose box center is nearest the image center."""
    grid = model.anchor_grid
    idxs = grid.indices_in_bucket(bucket)
    if idxs.numel() == 0:
        raise ConfigError(f"no anchors cover size bucket {bucket}")
    h, w = model.config.image_size
    boxes = grid.boxes[idxs].double()
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    centrality = (cx - w / 2) ** 2 + (cy - h / 2) ** 2
    return int(idxs[int(torch.argmin(centrality))])


def _scene_indices(cfg: dict, dataset_len: int) -> list[int]:
    scenes = list(cfg["scenes"])
    if not scenes:
        raise ConfigError("config key 'scenes' must list at least one scene index")
    for s in scenes:
        if not 0 <= s < dataset_len:
            raise ConfigError(f"scene {s} outside the split (0..{dataset_len - 1})")
    return scenes


# ---------------------------------------------------------------------------
# gen-data


def _cmd_gen_data(cfg: dict, ctx: RunContext) -> dict:
    spec = build_dataset_spec(cfg)
    out = Path(cfg["out"]) if cfg["out"] else ctx.run_dir / "dataset"
    manifest = generate_dataset(spec, out)
    for split in manifest["splits"]:
        ctx.outputs.append(str(out / f"{split}.json"))
    ctx.outputs.append(str(out / "manifest.json"))
    summary = {
        "dataset_dir": str(out),
        "spec_hash": manifest["spec_hash"],
        "splits": manifest["splits"],
    }
    if ctx.check:
        summary["motif_check"] = _check_motifs(out, spec)
    return summary


def _check_motifs(out: Path, spec) -> dict:
    """Recount planted motif statistics from the written annotations."""
    split = "train" if "train" in spec.split_sizes else sorted(spec.split_sizes)[0]
    data = json.loads((out / f"{split}.json").read_text())
    cats_by_image: dict[int, set] = defaultdict(set)
    centers: dict[tuple[int, int], float] = {}
    for a in data["annotations"]:
        cats_by_image[a["image_id"]].add(a["category_id"])
        x, y, w, h = a["bbox"]
        centers[(a["image_id"], a["category_id"])] = y + h / 2
    report = {}
    for rule in spec.motifs:
        t, c = category_id(rule.trigger), category_id(rule.companion)
        with_trigger = [i for i, cats in cats_by_image.items() if t in cats]
        n = len(with_trigger)
        if n == 0:
            raise CheckFailure(f"no scenes contain trigger {rule.trigger!r}")
        both = [i for i in with_trigger if c in cats_by_image[i]]
        freq = len(both) / n
        sigma = math.sqrt(rule.probability * (1 - rule.probability) / n)
        entry = {"scenes": n, "co_occurrence": freq, "expected": rule.probability}
        if abs(freq - rule.probability) > max(3 * sigma, 0.02):
            raise CheckFailure(
                f"motif {rule.trigger}->{rule.companion}: co-occurrence {freq:.3f} "
                f"off the planted {rule.probability} by more than 3 sigma"
            )
        if both:
            above = sum(centers[(i, c)] < centers[(i, t)] for i in both) / len(both)
            entry["above_fraction"] = above
            sigma_a = math.sqrt(rule.above_bias * (1 - rule.above_bias) / len(both))
            if abs(above - rule.above_bias) > max(3 * sigma_a, 0.02):
                raise CheckFailure(
                    f"motif {rule.trigger}->{rule.companion}: above fraction "
                    f"{above:.3f} off the planted {rule.above_bias}"
                )
        report[f"{rule.trigger}->{rule.companion}"] = entry
    return report


# ---------------------------------------------------------------------------
# train


def _cmd_train(cfg: dict, ctx: RunContext) -> dict:
    kind = cfg["kind"]
    if kind not in ("single_stage", "two_stage"):
        raise ConfigError(f"kind must be single_stage or two_stage, got {kind!r}")
    train_ds = _load_split(cfg, ctx, cfg["train_split"])
    val_ds = _load_split(cfg, ctx, cfg["val_split"])
    spec = train_ds.spec
    init_seed = split_seed(ctx.master_seed, "model-init")
    train_seed = split_seed(ctx.master_seed, "train")
    ctx.seeds.update({"model_init": init_seed, "train": train_seed})
    model = make_detector(
        kind, seed=init_seed,
        image_size=tuple(spec.image_size),
        num_categories=len(spec.categories),
    )
    tc_kwargs = {k: cfg[k] for k in _TRAIN_DEFAULTS}
    train_config = TrainConfig(seed=train_seed, **tc_kwargs)
    ckpt = ctx.out_path(cfg["checkpoint"] or "model.pt")
    logs = train_detector(
        model, train_ds, train_config, val_dataset=val_ds,
        checkpoint_path=ckpt, verbose=True,
    )
    atomic_write_json({"epochs": logs}, ctx.out_path("history.json"))
    preds = [_detect(model, val_ds[i][0], cfg["eval_score_thresh"]) for i in range(len(val_ds))]
    gts = [val_ds.layout(i) for i in range(len(val_ds))]
    ap = evaluate_ap(preds, gts, iou_thresholds=(0.5,))["ap"]
    summary = {"kind": kind, "val_ap50": ap, "epochs": len(logs), "checkpoint": str(ckpt)}
    if ctx.check and ap < cfg["check_ap"]:
        raise CheckFailure(
            f"val AP@0.5 {ap:.2f} below the required {cfg['check_ap']:.2f}"
        )
    return summary


# ---------------------------------------------------------------------------
# invert / invert2


def _cmd_invert(cfg: dict, ctx: RunContext, required_kind: str) -> dict:
    model = _load_model(cfg, ctx, required_kind=required_kind)
    run = invert_layout_two_stage if required_kind == "two_stage" else invert_layout
    if cfg["layout_json"]:
        ctx.hash_input(cfg["layout_json"])
        image_id = cfg["image_id"] if cfg["image_id"] >= 0 else None
        targets = [(0, load_layout_file(cfg["layout_json"], image_id))]
    else:
        ds = _load_split(cfg, ctx, cfg["split"])
        targets = [(s, ds.layout(s)) for s in _scene_indices(cfg, len(ds))]
    for _, layout in targets:
        if layout.image_size and tuple(layout.image_size) != tuple(model.config.image_size):
            raise ConfigError(
                f"layout image size {layout.image_size} does not match the model "
                f"{model.config.image_size}"
            )

    def one(item):
        scene, layout = item
        seed = split_seed(ctx.master_seed, f"invert:{scene}")
        res = run(model, layout, _inversion_config(cfg, seed))
        return scene, seed, layout, res

    results = map_jobs(one, targets, ctx.jobs)
    preds, gts, per_scene = [], [], []
    for scene, seed, layout, res in results:
        ctx.seeds[f"scene_{scene}"] = seed
        _save_image(res.image, ctx.out_path(f"scene_{scene:04d}.png"))
        _save_trace(res.trace, ctx.out_path(f"scene_{scene:04d}_trace.csv"))
        detections = _detect(model, res.image, cfg["eval_score_thresh"])
        atomic_write_json(
            {
                "scene": scene,
                "seed": seed,
                "converged": bool(res.success),
                "target": layout_to_dict(layout),
                "detections": layout_to_dict(detections),
            },
            ctx.out_path(f"scene_{scene:04d}_result.json"),
        )
        preds.append(detections)
        gts.append(layout)
        per_scene.append({"scene": scene, "converged": bool(res.success),
                          "n_target": len(layout), "n_detected": len(detections)})
    ap = evaluate_ap(preds, gts, iou_thresholds=(0.5,))["ap"] if gts else 0.0
    recall = _instance_recall(preds, gts)
    summary = {
        "scenes": [s for s, *_ in results],
        "redetect_ap50": ap,
        "instance_recall": recall,
        "per_scene": per_scene,
    }
    if ctx.check:
        if ap < cfg["check_ap"]:
            raise CheckFailure(
                f"re-detection AP@0.5 {ap:.2f} below the required {cfg['check_ap']:.2f}"
            )
        if recall < cfg["check_recall"]:
            raise CheckFailure(
                f"instance recall {recall:.3f} below the required {cfg['check_recall']:.3f}"
            )
    return summary


# ---------------------------------------------------------------------------
# disentangle


def _parse_subsets(raw: tuple[str, ...]) -> list[tuple[str, ...]]:
    subsets = []
    for part in raw:
        terms = tuple(t.strip() for t in part.split("+") if t.strip())
        if not terms:
            raise ConfigError(f"empty loss subset in {raw}")
        subsets.append(terms)
    return subsets


def _cmd_disentangle(cfg: dict, ctx: RunContext) -> dict:
    model = _load_model(cfg, ctx)
    ds = _load_split(cfg, ctx, cfg["split"])
    scene = cfg["scene"]
    if not 0 <= scene < len(ds):
        raise ConfigError(f"scene {scene} outside the split (0..{len(ds) - 1})")
    layout = ds.layout(scene)
    subsets = _parse_subsets(cfg["subsets"])
    runs = {}
    for subset in subsets:
        label = "+".join(subset)
        seed = split_seed(ctx.master_seed, f"disentangle:{label}")
        ctx.seeds[label] = seed
        res = invert_disentangled(
            model, layout, subset, _inversion_config(cfg, seed)
        )
        _save_image(res.image, ctx.out_path(f"{label.replace('+', '_')}.png"))
        runs[label] = {
            "converged": bool(res.success),
            "metrics": res.metrics,
            "detections": layout_to_dict(res.detections),
        }
    summary = {"scene": scene, "runs": runs}
    if ctx.check:
        _check_disentangled(cfg, model, runs)
    return summary


def _check_disentangled(cfg: dict, model, runs: dict) -> None:
    needed = {"cls", "reg", "cls+reg"}
    if not needed.issubset(runs):
        raise CheckFailure(
            f"--check needs subsets {sorted(needed)}, got {sorted(runs)}"
        )
    cls_m = runs["cls"]["metrics"]
    reg_m = runs["reg"]["metrics"]
    both_m = runs["cls+reg"]["metrics"]
    if cls_m["mean_cls_prob"] < cfg["check_prob"]:
        raise CheckFailure(
            f"cls-only class probability {cls_m['mean_cls_prob']:.3f} "
            f"below {cfg['check_prob']}"
        )
    margin = both_m["mean_box_iou"] - cfg["check_iou_margin"]
    if not cls_m["mean_box_iou"] < margin:
        raise CheckFailure(
            f"cls-only box IoU {cls_m['mean_box_iou']:.3f} not below the "
            f"cls+reg IoU minus margin ({margin:.3f})"
        )
    if reg_m["mean_box_iou"] < cfg["check_reg_iou"]:
        raise CheckFailure(
            f"reg-only box IoU {reg_m['mean_box_iou']:.3f} below {cfg['check_reg_iou']}"
        )
    if reg_m["mean_cls_prob"] >= model.post.score_thresh:
        raise CheckFailure(
            f"reg-only class probability {reg_m['mean_cls_prob']:.3f} reaches the "
            f"detection threshold {model.post.score_thresh}"
        )


# ---------------------------------------------------------------------------
# single-anchor


def _cmd_single_anchor(cfg: dict, ctx: RunContext) -> dict:
    model = _load_model(cfg, ctx)
    category = resolve_category(_require(cfg, "category"))
    if cfg["anchor_index"] >= 0:
        anchor_index = cfg["anchor_index"]
    elif cfg["cell_y"] >= 0 and cfg["cell_x"] >= 0:
        try:
            anchor_index = model.anchor_grid.index_of(
                cfg["level"], cfg["cell_y"], cfg["cell_x"], cfg["scale"]
            )
        except (ValueError, IndexError) as e:
            raise ConfigError(f"bad anchor coordinates: {e}") from e
    else:
        raise ConfigError(
            "set anchor_index, or cell_y and cell_x (with optional level/scale)"
        )
    seed = split_seed(ctx.master_seed, "single-anchor")
    ctx.seeds["single_anchor"] = seed
    res = visualize_single_anchor(
        model, anchor_index, category, _inversion_config(cfg, seed)
    )
    _save_image(res.image, ctx.out_path("visualization.png"))
    _save_trace(res.trace, ctx.out_path("trace.csv"))
    summary = {
        "anchor_index": anchor_index,
        "anchor_box": res.anchor_box.to_xyxy() if res.anchor_box else None,
        "category": category,
        "category_name": category_name(category),
        "prob": res.prob,
        "converged": bool(res.success),
        "detections": layout_to_dict(res.detections),
    }
    atomic_write_json(summary, ctx.out_path("result.json"))
    if ctx.check and (res.prob is None or res.prob < cfg["check_prob"]):
        raise CheckFailure(
            f"candidate probability {res.prob} below the required {cfg['check_prob']}"
        )
    return summary


# ---------------------------------------------------------------------------
# attribute


def _cmd_attribute(cfg: dict, ctx: RunContext) -> dict:
    model = _load_model(cfg, ctx)
    ds = _load_split(cfg, ctx, cfg["split"])
    if ctx.check:
        return _check_attribution(cfg, ctx, model, ds)
    scene = cfg["scene"]
    if not 0 <= scene < len(ds):
        raise ConfigError(f"scene {scene} outside the split (0..{len(ds) - 1})")
    image, layout = ds[scene]
    if not 0 <= cfg["instance"] < len(layout):
        raise ConfigError(
            f"instance {cfg['instance']} outside the scene (0..{len(layout) - 1})"
        )
    inst = layout.instances[cfg["instance"]]
    layer = cfg["layer"] or None
    request = AttributionRequest(
        model, image, inst.box, inst.category, target=cfg["target"],
        layer=layer, mask=inst.mask,
    )
    summary = {
        "scene": scene,
        "instance": cfg["instance"],
        "category": inst.category,
        "target": cfg["target"],
        "methods": {},
    }
    for method in cfg["methods"]:
        if method == "grad_cam":
            res = grad_cam(request)
            _save_gray(res.map, ctx.out_path("grad_cam.png"))
            summary["methods"][method] = {"layer": res.layer, "all_zero": res.all_zero}
        elif method == "norm_grad":
            res = norm_grad(request)
            _save_gray(res.map, ctx.out_path("norm_grad.png"))
            summary["methods"][method] = {"layer": res.layer, "all_zero": res.all_zero}
        elif method == "extremal_mask":
            res = extremal_mask(
                request, area_scale=cfg["area_scale"],
                iterations=cfg["extremal_iterations"],
            )
            _save_gray(res.mask, ctx.out_path("extremal_mask.png"))
            summary["methods"][method] = {
                "area_target": res.area_target,
                "area_achieved": res.area_achieved,
                "retention": res.retention,
                "success": res.success,
            }
        else:
            raise ConfigError(
                f"unknown method {method!r}; known: grad_cam, norm_grad, extremal_mask"
            )
    atomic_write_json(summary, ctx.out_path("result.json"))
    return summary


def _check_attribution(cfg: dict, ctx: RunContext, model, ds) -> dict:
    """Separation and retention criteria over the first n_instances of the split."""
    if isinstance(model, TwoStageDetector):
        raise ConfigError(
            "--check compares class and box-delta maps against a cross-layer "
            "baseline, which is only well-posed on the single-stage trunk; "
            "pass a single_stage checkpoint"
        )
    n = cfg["n_instances"]
    samples = (ds[i] for i in range(len(ds)))
    report = separation_report(model, samples, n_instances=n)
    retained = 0
    scored = 0
    for i in range(len(ds)):
        if scored >= n:
            break
        image, layout = ds[i]
        for inst in layout.instances:
            if scored >= n:
                break
            res = extremal_mask(
                AttributionRequest(
                    model, image, inst.box, inst.category, mask=inst.mask
                ),
                area_scale=cfg["area_scale"],
                iterations=cfg["extremal_iterations"],
            )
            scored += 1
            retained += (
                res.retention is not None
                and res.retention >= cfg["check_retention_value"]
            )
    retention_frac = retained / scored if scored else 0.0
    summary = {
        "separation": {
            m: {k: v for k, v in stats.items() if not k.startswith("per_instance")}
            for m, stats in report["methods"].items()
        },
        "n_instances": report["n"],
        "retention_fraction": retention_frac,
        "retention_scored": scored,
    }
    atomic_write_json(summary, ctx.out_path("check.json"))
    for m, stats in report["methods"].items():
        if not stats["separated"]:
            raise CheckFailure(
                f"{m}: class/delta IoU {stats['separation_iou']:.3f} not below "
                f"the class/class cross-layer baseline {stats['baseline_iou']:.3f}"
            )
    if retention_frac < cfg["check_retention_frac"]:
        raise CheckFailure(
            f"only {retention_frac:.2f} of instances retain "
            f">= {cfg['check_retention_value']} of the class probability "
            f"(need {cfg['check_retention_frac']:.2f})"
        )
    return summary


# ---------------------------------------------------------------------------
# transfer


def _cmd_transfer(cfg: dict, ctx: RunContext) -> dict:
    paths = cfg["checkpoints"]
    if len(paths) < 2:
        raise ConfigError("config key 'checkpoints' needs at least two entries")
    models = []
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"checkpoint not found: {p}")
        ctx.hash_input(p)
        models.append(load_checkpoint(p))
    ds = _load_split(cfg, ctx, cfg["split"])
    n = cfg["num_layouts"]
    if not 1 <= n <= len(ds):
        raise ConfigError(f"num_layouts {n} outside 1..{len(ds)}")
    layouts = [ds.layout(i) for i in range(n)]
    seed = split_seed(ctx.master_seed, "transfer")
    ctx.seeds["transfer"] = seed
    result = transfer_matrix(
        models, layouts,
        config=_inversion_config(cfg, seed),
        score_thresh=cfg["eval_score_thresh"],
    )
    summary = {
        "checkpoints": list(paths),
        "matrix": result["matrix"],
        "failed": result["failed"],
        "evaluated": result["evaluated"],
        "num_layouts": n,
    }
    atomic_write_json(summary, ctx.out_path("matrix.json"))
    with open(ctx.out_path("matrix.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["synthesis\\evaluation"] + [Path(p).name for p in paths])
        for name, row in zip(paths, result["matrix"]):
            writer.writerow([Path(name).name] + [f"{v:.2f}" for v in row])
    if ctx.check:
        for i, row in enumerate(result["matrix"]):
            off = [v for j, v in enumerate(row) if j != i]
            if off and row[i] < max(off):
                raise CheckFailure(
                    f"row {i} ({Path(paths[i]).name}): diagonal {row[i]:.2f} "
                    f"is not the row maximum ({max(off):.2f})"
                )
    return summary


# ---------------------------------------------------------------------------
# context


def _cmd_context(cfg: dict, ctx: RunContext) -> dict:
    model = _load_model(cfg, ctx)
    category = resolve_category(_require(cfg, "category"))
    if cfg["anchor_index"] >= 0:
        anchor_index = cfg["anchor_index"]
    else:
        covered = sorted(model.anchor_grid.covered_buckets())
        if not covered:
            raise ConfigError("the model's anchors cover no size bucket")
        anchor_index = _center_anchor(model, covered[len(covered) // 2])
    seed = split_seed(ctx.master_seed, "context")
    ctx.seeds["context"] = seed
    result = context_frequency(
        model, category, anchor_index, cfg["n_runs"],
        config=_inversion_config(cfg, seed),
        score_thresh=cfg["score_thresh"],
    )
    atomic_write_json(result, ctx.out_path("context.json"))
    with open(ctx.out_path("frequencies.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "name", "count", "frequency"])
        for cid, (count, freq) in enumerate(
            zip(result["counts"], result["frequency"])
        ):
            writer.writerow([cid, category_name(cid), count, f"{freq:.4f}"])
    summary = {
        "category": category,
        "category_name": category_name(category),
        "anchor_index": anchor_index,
        "n_runs": cfg["n_runs"],
        "frequency": result["frequency"],
        "visualization_success_rate": result["visualization_success_rate"],
    }
    if ctx.check:
        summary["check"] = _check_context(cfg, category, result)
    return summary


def _check_context(cfg: dict, category: int, result: dict) -> dict:
    partner = resolve_category(_require(cfg, "partner"))
    freq = result["frequency"]
    partner_freq = freq[partner]
    others = [
        (cid, f) for cid, f in enumerate(freq)
        if cid not in (category, partner)
    ]
    for cid, f in others:
        if partner_freq < cfg["check_ratio"] * f:
            raise CheckFailure(
                f"partner {category_name(partner)} frequency {partner_freq:.3f} is "
                f"not {cfg['check_ratio']}x {category_name(cid)} ({f:.3f})"
            )
    report = {"partner_frequency": partner_freq,
              "max_other": max((f for _, f in others), default=0.0)}
    if cfg["check_above"] >= 0.0:
        hist = result["positions"].get(partner) or result["positions"].get(str(partner))
        total = hist["total"] if hist else 0
        if not total:
            raise CheckFailure("no partner placements recorded for the above check")
        above = hist["vertical"]["above"] / total
        report["above_fraction"] = above
        if abs(above - cfg["check_above"]) > cfg["check_above_tol"]:
            raise CheckFailure(
                f"above fraction {above:.3f} outside "
                f"{cfg['check_above']} +/- {cfg['check_above_tol']}"
            )
    return report


# ---------------------------------------------------------------------------
# scale-sweep


def _cmd_scale_sweep(cfg: dict, ctx: RunContext) -> dict:
    model = _load_model(cfg, ctx)
    category = resolve_category(_require(cfg, "category"))
    seed = split_seed(ctx.master_seed, "scale-sweep")
    ctx.seeds["scale_sweep"] = seed
    result = scale_sweep(
        model, category,
        config=_inversion_config(cfg, seed),
        per_bucket=cfg["per_bucket"],
    )
    summary: dict = {"category": category, "category_name": category_name(category),
                     "reference_sides": list(SCALE_REFERENCE_SIDES), "buckets": {}}
    for bucket, entry in result.items():
        if "skipped" in entry:
            summary["buckets"][bucket] = entry
            continue
        for i, image in enumerate(entry["images"]):
            _save_image(image, ctx.out_path(f"bucket{bucket}_run{i}.png"))
        summary["buckets"][bucket] = {
            k: v for k, v in entry.items() if k != "images"
        }
    atomic_write_json(summary, ctx.out_path("sweep.json"))
    if ctx.check:
        for bucket, entry in summary["buckets"].items():
            if "skipped" in entry:
                continue
            if entry["rate"] < cfg["check_rate"]:
                raise CheckFailure(
                    f"bucket {bucket}: success rate {entry['rate']:.2f} below "
                    f"{cfg['check_rate']:.2f}"
                )
    return summary


# ---------------------------------------------------------------------------
# command table


def _with_inversion(extra_schema: dict, extra_defaults: dict) -> tuple[dict, dict]:
    schema = dict(_INV_SCHEMA)
    schema.update(extra_schema)
    defaults = dict(_INV_DEFAULTS)
    defaults.update(extra_defaults)
    return schema, defaults


def _gen_data_spec():
    schema, defaults = dataset_spec_schema()
    schema["out"] = "str"
    defaults["out"] = ""
    return schema, defaults, _cmd_gen_data


def _train_spec():
    schema = dict(_TRAIN_SCHEMA)
    defaults = dict(_TRAIN_DEFAULTS)
    schema.update({
        "kind": "str", "dataset": "str", "train_split": "str", "val_split": "str",
        "checkpoint": "str", "eval_score_thresh": "float", "check_ap": "float",
    })
    defaults.update({
        "kind": "single_stage", "dataset": "", "train_split": "train",
        "val_split": "val", "checkpoint": "", "eval_score_thresh": 0.05,
        "check_ap": 85.0,
    })
    return schema, defaults, _cmd_train


def _invert_spec(required_kind: str):
    schema, defaults = _with_inversion(
        {
            "checkpoint": "str", "dataset": "str", "split": "str",
            "scenes": "ints", "layout_json": "str", "image_id": "int",
            "eval_score_thresh": "float", "check_ap": "float",
            "check_recall": "float",
        },
        {
            "checkpoint": "", "dataset": "", "split": "val", "scenes": (0,),
            "layout_json": "", "image_id": -1, "eval_score_thresh": 0.05,
            "check_ap": 70.0, "check_recall": 0.9,
        },
    )
    return schema, defaults, lambda cfg, ctx: _cmd_invert(cfg, ctx, required_kind)


def _disentangle_spec():
    schema, defaults = _with_inversion(
        {
            "checkpoint": "str", "dataset": "str", "split": "str", "scene": "int",
            "subsets": "strs", "check_prob": "float", "check_iou_margin": "float",
            "check_reg_iou": "float",
        },
        {
            "checkpoint": "", "dataset": "", "split": "val", "scene": 0,
            "subsets": ("cls+reg", "cls", "reg"), "check_prob": 0.9,
            "check_iou_margin": 0.2, "check_reg_iou": 0.5,
        },
    )
    return schema, defaults, _cmd_disentangle


def _single_anchor_spec():
    schema, defaults = _with_inversion(
        {
            "checkpoint": "str", "category": "str", "anchor_index": "int",
            "level": "int", "cell_y": "int", "cell_x": "int", "scale": "int",
            "check_prob": "float",
        },
        {
            "checkpoint": "", "category": "", "anchor_index": -1, "level": 0,
            "cell_y": -1, "cell_x": -1, "scale": 0, "check_prob": 0.9,
        },
    )
    return schema, defaults, _cmd_single_anchor


def _attribute_spec():
    schema = {
        "checkpoint": "str", "dataset": "str", "split": "str", "scene": "int",
        "instance": "int", "methods": "strs", "target": "str", "layer": "str",
        "area_scale": "float", "extremal_iterations": "int", "n_instances": "int",
        "check_retention_value": "float", "check_retention_frac": "float",
    }
    defaults = {
        "checkpoint": "", "dataset": "", "split": "val", "scene": 0,
        "instance": 0, "methods": ("grad_cam", "norm_grad", "extremal_mask"),
        "target": "cls", "layer": "", "area_scale": 0.5,
        "extremal_iterations": 400, "n_instances": 50,
        "check_retention_value": 0.8, "check_retention_frac": 0.7,
    }
    return schema, defaults, _cmd_attribute


def _transfer_spec():
    schema, defaults = _with_inversion(
        {
            "checkpoints": "strs", "dataset": "str", "split": "str",
            "num_layouts": "int", "eval_score_thresh": "float",
        },
        {
            "checkpoints": (), "dataset": "", "split": "val",
            "num_layouts": 50, "eval_score_thresh": 0.05,
        },
    )
    return schema, defaults, _cmd_transfer


def _context_spec():
    schema, defaults = _with_inversion(
        {
            "checkpoint": "str", "category": "str", "anchor_index": "int",
            "n_runs": "int", "score_thresh": "float", "partner": "str",
            "check_ratio": "float", "check_above": "float",
            "check_above_tol": "float",
        },
        {
            "checkpoint": "", "category": "", "anchor_index": -1,
            "n_runs": 200, "score_thresh": 0.5, "partner": "",
            "check_ratio": 2.0, "check_above": -1.0, "check_above_tol": 0.1,
        },
    )
    return schema, defaults, _cmd_context


def _scale_sweep_spec():
    schema, defaults = _with_inversion(
        {
            "checkpoint": "str", "category": "str", "per_bucket": "int",
            "check_rate": "float",
        },
        {"checkpoint": "", "category": "", "per_bucket": 5, "check_rate": 0.5},
    )
    return schema, defaults, _cmd_scale_sweep


COMMANDS = {
    "gen-data": _gen_data_spec,
    "train": _train_spec,
    "invert": lambda: _invert_spec("single_stage"),
    "invert2": lambda: _invert_spec("two_stage"),
    "disentangle": _disentangle_spec,
    "single-anchor": _single_anchor_spec,
    "attribute": _attribute_spec,
    "transfer": _transfer_spec,
    "context": _context_spec,
    "scale-sweep": _scale_sweep_spec,
}


# ---------------------------------------------------------------------------
# driver


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detinvert",
        description="Train toy detectors on synthetic shapes and invert them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--output", default=None, help="run directory root")
        p.add_argument("--jobs", type=int, default=None, help="parallel jobs")
        p.add_argument(
            "--check", action="store_true",
            help="evaluate the command's pass/fail criterion (exit 3 on a miss)",
        )
    v = sub.add_parser("validate-layout", help="validate a layout JSON file")
    v.add_argument("file", help="annotation-style layout JSON")
    return parser


def _execute(args) -> int:
    command = args.command
    try:
        schema, defaults, runner = COMMANDS[command]()
        cfg = resolve_config(command, schema, defaults, args.config, args.set)
        if command == "gen-data" and args.seed:
            cfg["master_seed"] = args.seed
        jobs = job_count(args.jobs)
        root = output_root(args.output)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = make_run_dir(root, command)
    ctx = RunContext(
        run_dir=run_dir, jobs=jobs, check=args.check, master_seed=args.seed,
        seeds={"master": args.seed},
    )
    if args.config:
        ctx.hash_input(args.config)
    started = time.perf_counter()
    summary: dict = {}
    code = EXIT_OK
    try:
        summary = runner(cfg, ctx)
        ctx.success["run"] = True
        if args.check:
            ctx.success["check"] = True
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        ctx.success["run"] = False
        summary = {"error": str(e)}
        code = EXIT_CONFIG
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        ctx.success["run"] = True
        ctx.success["check"] = False
        summary = {"check_failure": str(e)}
        code = EXIT_CHECK
    except Exception as e:  # runtime errors still leave a manifest behind
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        ctx.success["run"] = False
        summary = {"error": f"{type(e).__name__}: {e}"}
        code = EXIT_RUNTIME

    atomic_write_json(summary, run_dir / "summary.json")
    manifest = RunManifest(
        command=command,
        config=cfg,
        seeds=ctx.seeds,
        code_version=code_version(),
        input_hashes=ctx.input_hashes,
        outputs=ctx.outputs + ["summary.json"],
        wall_time_s=time.perf_counter() - started,
        success=ctx.success,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    manifest.save(run_dir / "manifest.json")
    print(f"run directory: {run_dir}")
    for key in ("val_ap50", "redetect_ap50", "instance_recall", "prob",
                "visualization_success_rate"):
        if key in summary:
            print(f"  {key}: {summary[key]}")
    return code


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "validate-layout":
        errors = validate_layout(args.file)
        if errors:
            for err in errors:
                print(err, file=sys.stderr)
            return EXIT_CONFIG
        print("ok")
        return EXIT_OK
    return _execute(args)


if __name__ == "__main__":
    sys.exit(main())
