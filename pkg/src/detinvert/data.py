"""Synthetic scenes of colored shapes with planted co-occurrence motifs.

Scenes are procedurally rasterized: solid-color shapes (circle, square,
triangle, star, moon, diamond, cross, ring) on a low-frequency gray noise
background.  Instance masks are pixel-exact by construction and every box is
the tight hull of its visible mask, so the generator doubles as a
ground-truth oracle for the context-statistics experiments.

Motifs plant known co-occurrence structure: a rule (trigger, companion, p,
above_bias) gives each placed trigger instance an adjacent companion with
probability exactly p, placed directly above the trigger with probability
above_bias (else directly below).  The companion category never appears as an
independent object in scenes containing its trigger, so measured
co-occurrence stays pinned to p.

Everything is deterministic given (spec, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .geometry import Box, Detection, Layout

__all__ = [
    "CATEGORIES",
    "CATEGORY_NAMES",
    "NUM_CATEGORIES",
    "MotifRule",
    "DatasetSpec",
    "SceneInstance",
    "SceneRecord",
    "ShapesDataset",
    "GeneratedShapes",
    "category_id",
    "category_name",
    "category_color",
    "generate_scene",
    "generate_dataset",
    "rle_encode",
    "rle_decode",
    "image_to_tensor",
    "tensor_to_image",
    "motif_statistics",
    "category_instance_counts",
]


@dataclass(frozen=True)
class ShapeCategory:
    id: int
    name: str
    color: tuple[int, int, int]


CATEGORIES = (
    ShapeCategory(0, "circle", (220, 40, 40)),
    ShapeCategory(1, "square", (40, 70, 220)),
    ShapeCategory(2, "triangle", (40, 180, 70)),
    ShapeCategory(3, "star", (235, 200, 40)),
    ShapeCategory(4, "moon", (235, 235, 235)),
    ShapeCategory(5, "diamond", (200, 50, 200)),
    ShapeCategory(6, "cross", (240, 130, 30)),
    ShapeCategory(7, "ring", (40, 200, 210)),
)
CATEGORY_NAMES = tuple(c.name for c in CATEGORIES)
NUM_CATEGORIES = len(CATEGORIES)
_NAME_TO_ID = {c.name: c.id for c in CATEGORIES}


def category_id(name: str) -> int:
    try:
        return _NAME_TO_ID[name]
    except KeyError:
        raise ValueError(f"unknown category {name!r}; known: {CATEGORY_NAMES}") from None


def category_name(cid: int) -> str:
    if not 0 <= cid < NUM_CATEGORIES:
        raise ValueError(f"category id out of range: {cid}")
    return CATEGORIES[cid].name


def category_color(cid: int) -> tuple[int, int, int]:
    return CATEGORIES[cid].color


@dataclass(frozen=True)
class MotifRule:
    """Plant a companion next to each trigger instance with probability p."""

    trigger: str
    companion: str
    probability: float
    above_bias: float = 0.5


def _default_motifs() -> tuple[MotifRule, ...]:
    return (
        MotifRule("star", "moon", 0.9, 0.8),
        MotifRule("moon", "star", 0.2, 0.5),
    )


def _default_splits() -> dict[str, int]:
    return {"train": 800, "val": 200}


def _default_weights() -> dict[str, float]:
    # moon picks up extra instances as a companion of star; rebalancing both
    # keeps per-category counts roughly uniform while leaving most moons far
    # from any star (the planted asymmetry must stay visible)
    return {"moon": 0.9, "star": 0.75}


@dataclass
class DatasetSpec:
    """Full recipe for a dataset; hashable so artifacts can be cross-checked."""

    categories: tuple[str, ...] = CATEGORY_NAMES
    image_size: tuple[int, int] = (128, 128)  # (height, width)
    count_range: tuple[int, int] = (1, 5)
    size_range: tuple[float, float] = (16.0, 44.0)
    motifs: tuple[MotifRule, ...] = field(default_factory=_default_motifs)
    category_weights: dict[str, float] = field(default_factory=_default_weights)
    overlap_cap: float = 0.3
    companion_size_range: tuple[float, float] = (12.0, 20.0)
    companion_gap_range: tuple[float, float] = (2.0, 6.0)
    base_gray_range: tuple[float, float] = (0.35, 0.55)
    noise_amplitude: float = 0.06
    noise_grid: int = 8
    color_jitter: int = 10
    split_sizes: dict[str, int] = field(default_factory=_default_splits)
    master_seed: int = 0

    def validate(self) -> None:
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("category names must be unique")
        for name in self.categories:
            category_id(name)
        lo, hi = self.count_range
        if not (0 <= lo <= hi):
            raise ValueError(f"bad count range {self.count_range}")
        if hi > len(self.categories):
            raise ValueError("count range exceeds category pool (one instance per category per scene)")
        if self.size_range[0] < 5.0 or self.size_range[0] > self.size_range[1]:
            raise ValueError(f"bad size range {self.size_range}")
        for rule in self.motifs:
            if rule.trigger not in self.categories or rule.companion not in self.categories:
                raise ValueError(f"motif {rule} references unknown category")
            if rule.trigger == rule.companion:
                raise ValueError(f"motif {rule} pairs a category with itself")
            if not (0.0 <= rule.probability <= 1.0 and 0.0 <= rule.above_bias <= 1.0):
                raise ValueError(f"motif probabilities must be in [0, 1]: {rule}")
        for name, w in self.category_weights.items():
            if name not in self.categories or w <= 0:
                raise ValueError(f"bad category weight {name}={w}")
        if not (0.0 <= self.overlap_cap < 1.0):
            raise ValueError(f"overlap cap must be in [0, 1): {self.overlap_cap}")
        for name, n in self.split_sizes.items():
            if n <= 0:
                raise ValueError(f"split size must be positive: {name}={n}")
        if self.master_seed < 0:
            raise ValueError("master seed must be non-negative")
        if self.motifs:
            # trigger placement reserves vertical room for the companion on
            # either side, which must fit in the image
            h, w = self.image_size
            need = self.size_range[1] / 2 + self.companion_gap_range[1] + self.companion_size_range[1]
            if 2 * need > min(h, w):
                raise ValueError(
                    f"image {self.image_size} too small for motif companions (need {2 * need:.0f})"
                )

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "image_size": list(self.image_size),
            "count_range": list(self.count_range),
            "size_range": list(self.size_range),
            "motifs": [
                [r.trigger, r.companion, r.probability, r.above_bias] for r in self.motifs
            ],
            "category_weights": dict(sorted(self.category_weights.items())),
            "overlap_cap": self.overlap_cap,
            "companion_size_range": list(self.companion_size_range),
            "companion_gap_range": list(self.companion_gap_range),
            "base_gray_range": list(self.base_gray_range),
            "noise_amplitude": self.noise_amplitude,
            "noise_grid": self.noise_grid,
            "color_jitter": self.color_jitter,
            "split_sizes": dict(sorted(self.split_sizes.items())),
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            categories=tuple(d["categories"]),
            image_size=tuple(d["image_size"]),
            count_range=tuple(d["count_range"]),
            size_range=tuple(d["size_range"]),
            motifs=tuple(MotifRule(*row) for row in d["motifs"]),
            category_weights=dict(d["category_weights"]),
            overlap_cap=d["overlap_cap"],
            companion_size_range=tuple(d["companion_size_range"]),
            companion_gap_range=tuple(d["companion_gap_range"]),
            base_gray_range=tuple(d["base_gray_range"]),
            noise_amplitude=d["noise_amplitude"],
            noise_grid=d["noise_grid"],
            color_jitter=d["color_jitter"],
            split_sizes=dict(d["split_sizes"]),
            master_seed=d["master_seed"],
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SceneInstance:
    category: int
    box: Box  # tight hull of the visible mask
    mask: np.ndarray  # full-image boolean, visible pixels only
    role: str  # "primary" | "companion"
    partner: int | None = None  # instance index of the paired trigger/companion
    above: bool | None = None  # companion placed above its trigger


@dataclass
class SceneRecord:
    image: np.ndarray  # H x W x 3 uint8
    instances: list[SceneInstance]
    seed: int

    def layout(self) -> Layout:
        h, w = self.image.shape[:2]
        return Layout(
            [Detection(i.box, i.category, 1.0, mask=i.mask) for i in self.instances],
            image_size=(h, w),
        )


# ---------------------------------------------------------------------------
# shape rasterization


def _draw_shape(name: str, x0: int, y0: int, side: int, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    img = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(img)
    x1, y1 = x0 + side - 1, y0 + side - 1  # inclusive pixel coords
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    r = (side - 1) / 2.0
    if name == "circle":
        d.ellipse([x0, y0, x1, y1], fill=255)
    elif name == "square":
        d.rectangle([x0, y0, x1, y1], fill=255)
    elif name == "triangle":
        d.polygon([(cx, y0), (x0, y1), (x1, y1)], fill=255)
    elif name == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else 0.45 * r
            ang = -math.pi / 2 + k * math.pi / 5
            pts.append((cx + rad * math.cos(ang), cy + rad * math.sin(ang)))
        d.polygon(pts, fill=255)
    elif name == "moon":
        d.ellipse([x0, y0, x1, y1], fill=255)
        off = max(2, round(0.35 * side))
        d.ellipse([x0 + off, y0, x1 + off, y1], fill=0)
    elif name == "diamond":
        d.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=255)
    elif name == "cross":
        arm = max(1, round(0.17 * side))
        d.rectangle([round(cx) - arm, y0, round(cx) + arm, y1], fill=255)
        d.rectangle([x0, round(cy) - arm, x1, round(cy) + arm], fill=255)
    elif name == "ring":
        d.ellipse([x0, y0, x1, y1], fill=255)
        inner = round(0.45 * r)
        if inner >= 1:
            d.ellipse(
                [round(cx) - inner, round(cy) - inner, round(cx) + inner, round(cy) + inner],
                fill=0,
            )
    else:
        raise ValueError(f"no rasterizer for category {name!r}")
    return np.asarray(img, dtype=np.uint8) > 0


def _background(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    base = rng.uniform(*spec.base_gray_range)
    g = max(2, spec.noise_grid)
    coarse = rng.standard_normal((1, 1, g, g))
    smooth = F.interpolate(
        torch.from_numpy(coarse), size=(h, w), mode="bilinear", align_corners=False
    )[0, 0].numpy()
    tint = rng.uniform(-0.02, 0.02, size=3)
    img = base + spec.noise_amplitude * smooth[..., None] + tint[None, None, :]
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# placement


def _overlap_ok(box: Box, others: list[Box], cap: float) -> bool:
    for o in others:
        ix = min(box.x_max, o.x_max) - max(box.x_min, o.x_min)
        iy = min(box.y_max, o.y_max) - max(box.y_min, o.y_min)
        if ix <= 0 or iy <= 0:
            continue
        inter = ix * iy
        union = box.area + o.area - inter
        if inter / union > cap:
            return False
        # also cap coverage of the smaller box so nothing gets buried
        if inter / min(box.area, o.area) > 0.35:
            return False
    return True


def _nominal_box(cx: float, cy: float, size: float) -> tuple[Box, tuple[int, int, int]]:
    side = max(5, int(round(size)))
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    return Box(x0, y0, x0 + side, y0 + side), (x0, y0, side)


class _Placed:
    __slots__ = ("category", "box", "raster", "role", "partner", "above")

    def __init__(self, category, box, raster, role, partner=None, above=None):
        self.category = category
        self.box = box
        self.raster = raster  # (x0, y0, side)
        self.role = role
        self.partner = partner  # another _Placed or None
        self.above = above


def _scene_categories(spec: DatasetSpec, rng: np.random.Generator) -> list[int]:
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return []
    ids = np.array([category_id(c) for c in spec.categories])
    weights = np.array([spec.category_weights.get(c, 1.0) for c in spec.categories])
    cats = list(rng.choice(ids, size=n, replace=False, p=weights / weights.sum()))
    # a companion category may not appear independently next to its trigger,
    # otherwise measured co-occurrence would drift above the planted p
    for _ in range(2):
        for rule in spec.motifs:
            t, b = category_id(rule.trigger), category_id(rule.companion)
            if t in cats and b in cats:
                pool = [int(c) for c in ids if c not in cats and c != b]
                if pool:
                    cats[cats.index(b)] = int(rng.choice(np.array(pool)))
                else:
                    cats.remove(b)
    return [int(c) for c in cats]


def _place_instances(spec: DatasetSpec, rng: np.random.Generator) -> list[_Placed]:
    h, w = spec.image_size
    rules = {category_id(r.trigger): r for r in spec.motifs}
    placed: list[_Placed] = []
    boxes: list[Box] = []
    s_lo, s_hi = spec.size_range
    gap_lo, gap_hi = spec.companion_gap_range
    c_lo, c_hi = spec.companion_size_range

    for cat in _scene_categories(spec, rng):
        rule = rules.get(cat)
        hit = None
        for attempt in range(150):
            hi_s = s_hi if attempt < 75 else (s_lo + s_hi) / 2.0
            size = rng.uniform(s_lo, hi_s)
            if rule is not None:
                # leave room for a companion directly above or below
                margin = size / 2.0 + gap_hi + c_hi
            else:
                margin = size / 2.0
            if 2 * margin >= min(h, w):
                continue
            cx = rng.uniform(size / 2.0, w - size / 2.0)
            cy = rng.uniform(margin, h - margin)
            box, raster = _nominal_box(cx, cy, size)
            if _overlap_ok(box, boxes, spec.overlap_cap):
                hit = _Placed(cat, box, raster, "primary")
                break
        if hit is None:
            continue
        placed.append(hit)
        boxes.append(hit.box)

        if rule is not None and rng.random() < rule.probability:
            above = bool(rng.random() < rule.above_bias)
            comp = None
            pcx, pcy = hit.box.center
            psize = hit.box.width
            for _ in range(150):
                csize = rng.uniform(c_lo, c_hi)
                gap = rng.uniform(gap_lo, gap_hi)
                ccx = float(np.clip(pcx + rng.uniform(-0.35, 0.35) * psize, csize / 2.0, w - csize / 2.0))
                if above:
                    ccy = hit.box.y_min - gap - csize / 2.0
                else:
                    ccy = hit.box.y_max + gap + csize / 2.0
                cbox, craster = _nominal_box(ccx, ccy, csize)
                if cbox.y_min < 0 or cbox.y_max > h:
                    continue
                if _overlap_ok(cbox, boxes, spec.overlap_cap):
                    comp = _Placed(category_id(rule.companion), cbox, craster, "companion", hit, above)
                    break
            if comp is None:
                # keep the conditional clean: no companion means no trigger
                placed.pop()
                boxes.pop()
            else:
                placed.append(comp)
                boxes.append(comp.box)

    # motif companions may push the scene over budget; shed an uninvolved
    # primary so the instance count stays within the configured range
    hi = spec.count_range[1]
    while len(placed) > hi:
        involved = {id(p.partner) for p in placed if p.partner is not None}
        removable = [
            p
            for p in placed
            if p.role == "primary" and p.partner is None and id(p) not in involved
        ]
        if not removable:
            break
        drop = removable[int(rng.integers(len(removable)))]
        placed.remove(drop)
    return placed


def generate_scene(spec: DatasetSpec, seed: int) -> SceneRecord:
    """Render one deterministic scene; pixel-exact masks, tight boxes."""
    spec.validate()
    if seed < 0:
        raise ValueError("scene seed must be non-negative")
    h, w = spec.image_size
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        placed = _place_instances(spec, rng)
        image = _background(spec, rng)

        full_masks = [_draw_shape(category_name(p.category), *p.raster, (h, w)) for p in placed]
        idmap = np.zeros((h, w), dtype=np.int32)
        for k, m in enumerate(full_masks, start=1):
            idmap[m] = k

        ok = True
        instances: list[SceneInstance] = []
        index_of = {}
        for k, p in enumerate(placed):
            visible = idmap == k + 1
            n_vis = int(visible.sum())
            if n_vis == 0 or n_vis < 0.45 * int(full_masks[k].sum()):
                ok = False
                break
            ys, xs = np.nonzero(visible)
            box = Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            jitter = rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
            color = np.clip(np.array(category_color(p.category)) + jitter, 25, 250)
            image[visible] = color.astype(np.uint8)
            index_of[id(p)] = k
            instances.append(SceneInstance(p.category, box, visible, p.role, None, p.above))
        if not ok:
            continue
        for k, p in enumerate(placed):
            if p.partner is not None:
                instances[k].partner = index_of[id(p.partner)]
        return SceneRecord(image=image, instances=instances, seed=seed)
    raise RuntimeError(f"scene generation failed to converge for seed {seed}")


# ---------------------------------------------------------------------------
# RLE masks


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major run-length encoding, first run counts zeros."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.flatten(order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    idx = np.concatenate([[0], boundaries, [flat.size]])
    counts = np.diff(idx).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [h, w], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for run in rle["counts"]:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    if pos != h * w:
        raise ValueError(f"RLE runs cover {pos} pixels, expected {h * w}")
    return flat.reshape((h, w), order="F")


# ---------------------------------------------------------------------------
# tensors


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W float32 in [0, 1]."""
    arr = np.ascontiguousarray(image)
    if not arr.flags.writeable:  # PIL hands out read-only arrays
        arr = arr.copy()
    return torch.from_numpy(arr).permute(2, 0, 1).float() / 255.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = (t.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


# ---------------------------------------------------------------------------
# datasets


def _scene_seed(master_seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, stream, index]).generate_state(1)[0])


class GeneratedShapes:
    """Split generated on demand and cached in memory; no files involved.

    ``stream`` separates splits drawn from the same master seed (0 = train,
    1 = val by convention).
    """

    def __init__(self, spec: DatasetSpec, count: int, stream: int = 0):
        spec.validate()
        self.spec = spec
        self.count = count
        self.stream = stream
        self._cache: dict[int, SceneRecord] = {}

    def __len__(self) -> int:
        return self.count

    def record(self, i: int) -> SceneRecord:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = generate_scene(
                self.spec, _scene_seed(self.spec.master_seed, self.stream, i)
            )
        return self._cache[i]

    def layout(self, i: int) -> Layout:
        return self.record(i).layout()

    def __getitem__(self, i: int) -> tuple[torch.Tensor, Layout]:
        rec = self.record(i)
        return image_to_tensor(rec.image), rec.layout()


_SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict:
    """Write PNG images plus one annotation JSON per split; fully reproducible."""
    spec.validate()
    out = Path(out_dir)
    images_dir = out / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create dataset directory {images_dir}: {e}") from e

    manifest = {"spec": spec.to_dict(), "spec_hash": spec.spec_hash(), "splits": {}}
    for split_idx, (split, count) in enumerate(sorted(spec.split_sizes.items())):
        stream = _SPLIT_STREAMS.get(split, 10 + split_idx)
        images, annotations = [], []
        ann_id = 0
        for i in range(count):
            rec = generate_scene(spec, _scene_seed(spec.master_seed, stream, i))
            fname = f"images/{split}_{i:05d}.png"
            path = out / fname
            try:
                Image.fromarray(rec.image).save(path)
            except OSError as e:
                raise RuntimeError(f"cannot write image {path}: {e}") from e
            h, w = rec.image.shape[:2]
            images.append({"id": i, "file": fname, "width": w, "height": h})
            for inst in rec.instances:
                x, y, bw, bh = inst.box.to_xywh()
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": i,
                        "category_id": inst.category,
                        "bbox": [x, y, bw, bh],
                        "area": float(inst.mask.sum()),
                        "iscrowd": 0,
                        "mask": rle_encode(inst.mask),
                    }
                )
                ann_id += 1
        payload = {
            "meta": {
                "spec": spec.to_dict(),
                "spec_hash": spec.spec_hash(),
                "split": split,
                "stream": stream,
            },
            "images": images,
            "annotations": annotations,
            "categories": [
                {"id": c.id, "name": c.name, "color": list(c.color)} for c in CATEGORIES
            ],
        }
        json_path = out / f"{split}.json"
        try:
            json_path.write_text(json.dumps(payload, sort_keys=True))
        except OSError as e:
            raise RuntimeError(f"cannot write annotations {json_path}: {e}") from e
        manifest["splits"][split] = {
            "file": f"{split}.json",
            "images": count,
            "annotations": ann_id,
        }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


class ShapesDataset:
    """Split loaded back from generate_dataset output."""

    def __init__(self, root: str | Path, split: str = "train", expected_spec: DatasetSpec | None = None):
        self.root = Path(root)
        path = self.root / f"{split}.json"
        if not path.exists():
            raise FileNotFoundError(f"no annotation file {path}")
        data = json.loads(path.read_text())
        meta = data["meta"]
        self.spec = DatasetSpec.from_dict(meta["spec"])
        recorded = meta["spec_hash"]
        if self.spec.spec_hash() != recorded:
            raise ValueError(f"{path}: embedded spec does not match its recorded hash")
        if expected_spec is not None and expected_spec.spec_hash() != recorded:
            raise ValueError(
                f"{path}: dataset was generated from a different spec "
                f"({recorded[:12]} != {expected_spec.spec_hash()[:12]})"
            )
        self.images = sorted(data["images"], key=lambda im: im["id"])
        self._ann: dict[int, list[dict]] = {im["id"]: [] for im in self.images}
        for a in data["annotations"]:
            self._ann[a["image_id"]].append(a)

    def __len__(self) -> int:
        return len(self.images)

    def layout(self, i: int) -> Layout:
        im = self.images[i]
        dets = []
        for a in sorted(self._ann[im["id"]], key=lambda a: a["id"]):
            dets.append(
                Detection(
                    Box.from_xywh(*a["bbox"]),
                    a["category_id"],
                    1.0,
                    mask=rle_decode(a["mask"]),
                )
            )
        return Layout(dets, image_size=(im["height"], im["width"]))

    def __getitem__(self, i: int) -> tuple[torch.Tensor, Layout]:
        im = self.images[i]
        arr = np.asarray(Image.open(self.root / im["file"]).convert("RGB"))
        return image_to_tensor(arr), self.layout(i)


# ---------------------------------------------------------------------------
# planted-truth measurement


def motif_statistics(records: list[SceneRecord], spec: DatasetSpec) -> dict:
    """Observed companion and above fractions per motif rule.

    Keyed by (trigger, companion) names; counts use the generator's own
    provenance tags, so this measures exactly what was planted.
    """
    out = {}
    for rule in spec.motifs:
        t, b = category_id(rule.trigger), category_id(rule.companion)
        triggers = companions = above = 0
        for rec in records:
            for k, inst in enumerate(rec.instances):
                if inst.category == t and inst.role == "primary":
                    triggers += 1
                    comp = next(
                        (
                            c
                            for c in rec.instances
                            if c.role == "companion" and c.partner == k and c.category == b
                        ),
                        None,
                    )
                    if comp is not None:
                        companions += 1
                        above += int(bool(comp.above))
        out[(rule.trigger, rule.companion)] = {
            "triggers": triggers,
            "companion_fraction": companions / triggers if triggers else 0.0,
            "above_fraction": above / companions if companions else 0.0,
        }
    return out


def category_instance_counts(records: list[SceneRecord]) -> dict[str, int]:
    counts = {name: 0 for name in CATEGORY_NAMES}
    for rec in records:
        for inst in rec.instances:
            counts[category_name(inst.category)] += 1
    return counts
