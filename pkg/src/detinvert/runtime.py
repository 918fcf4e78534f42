"""Run plumbing shared by the command-line entry point.

Configuration comes from a key-value text file plus ``--set`` overrides; every
key is validated against a per-command schema before any compute starts, and
the fully resolved values land in a run manifest next to the artifacts.  All
randomness flows from one master seed that is split per component with a
stable hash, so a manifest alone suffices to re-run an experiment.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    CATEGORY_NAMES,
    DatasetSpec,
    MotifRule,
    category_id,
    rle_decode,
)
from .geometry import Box, Detection, Layout

__all__ = [
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_RUNTIME",
    "EXIT_CHECK",
    "ConfigError",
    "CheckFailure",
    "RunManifest",
    "parse_config_file",
    "resolve_config",
    "schema_from_dataclass",
    "dataset_spec_schema",
    "build_dataset_spec",
    "split_seed",
    "file_sha256",
    "code_version",
    "make_run_dir",
    "output_root",
    "job_count",
    "map_jobs",
    "atomic_write_json",
    "validate_layout",
    "load_layout_file",
    "layout_to_dict",
    "resolve_category",
]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

ENV_OUTPUT_ROOT = "DETINVERT_OUTPUT_ROOT"
ENV_JOBS = "DETINVERT_JOBS"


class ConfigError(Exception):
    """Bad configuration: unknown keys, unparsable values, missing inputs."""


class CheckFailure(Exception):
    """A --check criterion did not hold; the run itself completed."""


# ---------------------------------------------------------------------------
# value parsing


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_list(raw: str, cast):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(cast(part.strip()) for part in raw.split(","))


def _parse_size(raw: str) -> tuple[int, int]:
    sep = "x" if "x" in raw else ","
    parts = [p.strip() for p in raw.split(sep)]
    if len(parts) != 2:
        raise ValueError(f"expected HEIGHTxWIDTH, got {raw!r}")
    return int(parts[0]), int(parts[1])


def _parse_pair(raw: str, cast):
    vals = _parse_list(raw, cast)
    if len(vals) != 2:
        raise ValueError(f"expected two comma-separated values, got {raw!r}")
    return vals


def _parse_motifs(raw: str) -> tuple[MotifRule, ...]:
    """``trigger>companion:prob[:above_bias]`` entries, comma separated."""
    rules = []
    for part in _parse_list(raw, str):
        head, _, tail = part.partition(":")
        if ">" not in head or not tail:
            raise ValueError(
                f"expected trigger>companion:prob[:above], got {part!r}"
            )
        trigger, _, companion = head.partition(">")
        nums = tail.split(":")
        if len(nums) not in (1, 2):
            raise ValueError(f"too many fields in motif {part!r}")
        prob = float(nums[0])
        above = float(nums[1]) if len(nums) == 2 else 0.5
        rules.append(MotifRule(trigger.strip(), companion.strip(), prob, above))
    return tuple(rules)


def _parse_str_map(raw: str, cast) -> dict:
    out = {}
    for part in _parse_list(raw, str):
        name, sep, val = part.partition(":")
        if not sep:
            raise ValueError(f"expected name:value, got {part!r}")
        out[name.strip()] = cast(val.strip())
    return out


_CASTERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "ints": lambda raw: _parse_list(raw, int),
    "floats": lambda raw: _parse_list(raw, float),
    "strs": lambda raw: _parse_list(raw, str),
    "size": _parse_size,
    "int_pair": lambda raw: _parse_pair(raw, int),
    "float_pair": lambda raw: _parse_pair(raw, float),
    "motifs": _parse_motifs,
    "float_map": lambda raw: _parse_str_map(raw, float),
    "int_map": lambda raw: _parse_str_map(raw, int),
}


def parse_config_file(path: str | Path) -> list[tuple[str, str]]:
    """Read ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    pairs = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(
    command: str,
    schema: dict[str, str],
    defaults: dict,
    config_file: str | Path | None = None,
    overrides: list[str] | None = None,
) -> dict:
    """Defaults overlaid with file pairs then --set pairs, schema-checked.

    Raises ConfigError naming the offending field path before any compute.
    """
    cfg = dict(defaults)
    pairs = list(parse_config_file(config_file)) if config_file else []
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs.append((key.strip(), value.strip()))
    for key, raw in pairs:
        if key not in schema:
            known = ", ".join(sorted(schema))
            raise ConfigError(f"{command}: unknown config key '{key}' (known: {known})")
        try:
            cfg[key] = _CASTERS[schema[key]](raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"config key '{key}': {e}") from e
    return cfg


_TYPE_NAMES = {int: "int", float: "float", str: "str", bool: "bool"}


def schema_from_dataclass(cls, prefix: str = "", skip: tuple[str, ...] = ()) -> tuple[dict, dict]:
    """(schema, defaults) for the scalar/tuple fields of a config dataclass."""
    schema: dict[str, str] = {}
    defaults: dict = {}
    probe = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        value = getattr(probe, f.name)
        key = prefix + f.name
        if isinstance(value, bool):
            schema[key] = "bool"
        elif isinstance(value, int):
            schema[key] = "int"
        elif isinstance(value, float):
            schema[key] = "float"
        elif isinstance(value, str):
            schema[key] = "str"
        elif isinstance(value, tuple) and all(isinstance(x, str) for x in value):
            schema[key] = "strs"
        else:
            continue  # nested structures get hand-written entries
        defaults[key] = value
    return schema, defaults


def dataset_spec_schema() -> tuple[dict, dict]:
    spec = DatasetSpec()
    schema = {
        "categories": "strs",
        "image_size": "size",
        "count_range": "int_pair",
        "size_range": "float_pair",
        "motifs": "motifs",
        "category_weights": "float_map",
        "overlap_cap": "float",
        "companion_size_range": "float_pair",
        "companion_gap_range": "float_pair",
        "base_gray_range": "float_pair",
        "noise_amplitude": "float",
        "noise_grid": "int",
        "color_jitter": "int",
        "split_sizes": "int_map",
        "master_seed": "int",
    }
    defaults = {
        "categories": spec.categories,
        "image_size": spec.image_size,
        "count_range": spec.count_range,
        "size_range": spec.size_range,
        "motifs": spec.motifs,
        "category_weights": dict(spec.category_weights),
        "overlap_cap": spec.overlap_cap,
        "companion_size_range": spec.companion_size_range,
        "companion_gap_range": spec.companion_gap_range,
        "base_gray_range": spec.base_gray_range,
        "noise_amplitude": spec.noise_amplitude,
        "noise_grid": spec.noise_grid,
        "color_jitter": spec.color_jitter,
        "split_sizes": dict(spec.split_sizes),
        "master_seed": spec.master_seed,
    }
    return schema, defaults


def build_dataset_spec(cfg: dict) -> DatasetSpec:
    spec = DatasetSpec(
        categories=tuple(cfg["categories"]),
        image_size=tuple(cfg["image_size"]),
        count_range=tuple(cfg["count_range"]),
        size_range=tuple(cfg["size_range"]),
        motifs=tuple(cfg["motifs"]),
        category_weights=dict(cfg["category_weights"]),
        overlap_cap=cfg["overlap_cap"],
        companion_size_range=tuple(cfg["companion_size_range"]),
        companion_gap_range=tuple(cfg["companion_gap_range"]),
        base_gray_range=tuple(cfg["base_gray_range"]),
        noise_amplitude=cfg["noise_amplitude"],
        noise_grid=cfg["noise_grid"],
        color_jitter=cfg["color_jitter"],
        split_sizes=dict(cfg["split_sizes"]),
        master_seed=cfg["master_seed"],
    )
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return spec


# ---------------------------------------------------------------------------
# seeds, hashes, run directories


def split_seed(master: int, label: str) -> int:
    """Stable per-component seed derived from the master seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Short git revision when available, else a hash of the package source."""
    pkg_dir = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=pkg_dir, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return "git:" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha256()
    for py in sorted(pkg_dir.glob("*.py")):
        h.update(py.name.encode())
        h.update(py.read_bytes())
    return "src:" + h.hexdigest()[:12]


def output_root(flag_value: str | None = None) -> Path:
    if flag_value:
        return Path(flag_value)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))


def job_count(flag_value: int | None = None) -> int:
    if flag_value is not None:
        n = flag_value
    else:
        try:
            n = int(os.environ.get(ENV_JOBS, "1"))
        except ValueError as e:
            raise ConfigError(f"{ENV_JOBS} must be an integer") from e
    if n < 1:
        raise ConfigError(f"job count must be >= 1, got {n}")
    return n


def make_run_dir(root: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for k in range(1000):
        suffix = "" if k == 0 else f"-{k}"
        candidate = root / f"{command}-{stamp}{suffix}"
        try:
            candidate.mkdir(parents=True, exist_ok=False)
            return candidate
        except FileExistsError:
            continue
    raise RuntimeError(f"cannot allocate a run directory under {root}")


def map_jobs(fn, items, jobs: int = 1) -> list:
    """Order-preserving map; a thread pool when jobs > 1.

    Each item must be independent (seed-isolated, no shared accumulators) so
    results do not depend on scheduling.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    """Everything needed to reproduce one run, written next to its artifacts."""

    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    code_version: str = ""
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    success: dict = field(default_factory=dict)
    created: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        atomic_write_json(self.to_dict(), path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    if isinstance(obj, MotifRule):
        return [obj.trigger, obj.companion, obj.probability, obj.above_bias]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def atomic_write_json(payload: dict, path: str | Path) -> None:
    """Write JSON via a temp file and rename, so readers never see a torso."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# layout JSON


def resolve_category(value: str) -> int:
    """Category id from a name or a decimal id string."""
    value = value.strip()
    if value.lstrip("-").isdigit():
        cid = int(value)
        if not 0 <= cid < len(CATEGORY_NAMES):
            raise ConfigError(
                f"category id {cid} outside [0, {len(CATEGORY_NAMES)})"
            )
        return cid
    try:
        return category_id(value)
    except ValueError as e:
        raise ConfigError(
            f"unknown category {value!r} (known: {', '.join(CATEGORY_NAMES)})"
        ) from e


def validate_layout(path: str | Path) -> list[str]:
    """All schema violations in an annotation-style layout file.

    The file follows the dataset annotation shape: ``images`` with ids and
    dimensions, ``annotations`` with image_id, category_id and ``[x, y, w, h]``
    boxes inside the image, optional run-length masks, and a ``categories``
    table.  Returns an empty list when the file is valid.
    """
    p = Path(path)
    if not p.exists():
        return [f"{p}: file not found"]
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        return [f"{p}: not valid JSON ({e})"]
    errors: list[str] = []
    if not isinstance(data, dict):
        return [f"{p}: top level must be an object"]

    images = data.get("images")
    if not isinstance(images, list):
        errors.append("images: required list is missing")
        images = []
    dims: dict[int, tuple[int, int]] = {}
    for i, im in enumerate(images):
        where = f"images[{i}]"
        if not isinstance(im, dict):
            errors.append(f"{where}: must be an object")
            continue
        if not isinstance(im.get("id"), int):
            errors.append(f"{where}.id: required integer is missing")
            continue
        if im["id"] in dims:
            errors.append(f"{where}.id: duplicate image id {im['id']}")
        w, h = im.get("width"), im.get("height")
        if not (isinstance(w, int) and w > 0 and isinstance(h, int) and h > 0):
            errors.append(f"{where}: width/height must be positive integers")
            continue
        dims[im["id"]] = (w, h)

    cat_entries = data.get("categories")
    valid_ids: set[int] | None = None
    if cat_entries is not None:
        if not isinstance(cat_entries, list):
            errors.append("categories: must be a list when present")
        else:
            valid_ids = set()
            for i, c in enumerate(cat_entries):
                if not isinstance(c, dict) or not isinstance(c.get("id"), int):
                    errors.append(f"categories[{i}].id: required integer is missing")
                else:
                    valid_ids.add(c["id"])
    if valid_ids is None:
        valid_ids = set(range(len(CATEGORY_NAMES)))

    annotations = data.get("annotations")
    if not isinstance(annotations, list):
        errors.append("annotations: required list is missing")
        annotations = []
    for i, a in enumerate(annotations):
        where = f"annotations[{i}]"
        if not isinstance(a, dict):
            errors.append(f"{where}: must be an object")
            continue
        img_id = a.get("image_id")
        if not isinstance(img_id, int) or img_id not in dims:
            errors.append(f"{where}.image_id: {img_id!r} does not name an image")
            continue
        cid = a.get("category_id")
        if not isinstance(cid, int) or cid not in valid_ids:
            errors.append(f"{where}.category_id: {cid!r} is not a known category id")
        bbox = a.get("bbox")
        if (
            not isinstance(bbox, list)
            or len(bbox) != 4
            or not all(isinstance(v, (int, float)) for v in bbox)
        ):
            errors.append(f"{where}.bbox: must be [x, y, w, h] numbers")
            continue
        x, y, w, h = (float(v) for v in bbox)
        img_w, img_h = dims[img_id]
        if w <= 0 or h <= 0:
            errors.append(f"{where}.bbox: width/height must be positive, got {bbox}")
        if x < 0 or y < 0 or x + w > img_w or y + h > img_h:
            errors.append(
                f"{where}.bbox: {bbox} outside the {img_w}x{img_h} image bounds"
            )
        mask = a.get("mask")
        if mask is not None:
            if (
                not isinstance(mask, dict)
                or "size" not in mask
                or "counts" not in mask
            ):
                errors.append(f"{where}.mask: must carry 'size' and 'counts'")
            elif list(mask["size"]) != [img_h, img_w]:
                errors.append(
                    f"{where}.mask.size: {mask['size']} does not match the image "
                    f"({img_h}x{img_w})"
                )
    return errors


def load_layout_file(path: str | Path, image_id: int | None = None) -> Layout:
    """One image's layout from a validated annotation-style file."""
    errors = validate_layout(path)
    if errors:
        raise ConfigError(
            f"layout file {path} is invalid:\n  " + "\n  ".join(errors)
        )
    data = json.loads(Path(path).read_text())
    images = sorted(data["images"], key=lambda im: im["id"])
    if image_id is None:
        image_id = images[0]["id"]
    by_id = {im["id"]: im for im in images}
    if image_id not in by_id:
        raise ConfigError(f"layout file {path} has no image id {image_id}")
    im = by_id[image_id]
    dets = []
    for a in sorted(data["annotations"], key=lambda a: a.get("id", 0)):
        if a["image_id"] != image_id:
            continue
        x, y, w, h = (float(v) for v in a["bbox"])
        mask = rle_decode(a["mask"]) if a.get("mask") is not None else None
        dets.append(
            Detection(Box(x, y, x + w, y + h), a["category_id"], 1.0, mask=mask)
        )
    return Layout(dets, image_size=(im["height"], im["width"]))


def layout_to_dict(layout: Layout) -> dict:
    """JSON-friendly record of a detection set (no masks)."""
    out = {"image_size": list(layout.image_size or ()), "instances": []}
    for det in layout.instances:
        out["instances"].append(
            {
                "category": det.category,
                "score": float(det.score),
                "box": [
                    float(det.box.x_min),
                    float(det.box.y_min),
                    float(det.box.x_max),
                    float(det.box.y_max),
                ],
            }
        )
    return out
