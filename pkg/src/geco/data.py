"""Synthetic low-shot counting scenes, annotation files and the test-time resize rule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ResizeConfig
from .errors import MissingImage, PlacementFailure, SchemaError
from .geometry import as_boxes, pairwise_iou

SHAPE_KINDS = ("disc", "rectangle", "bar", "ant")
ANNOTATION_VERSION = 1
MAX_ATTEMPTS = 1000
MAX_IOU = 0.3


@dataclass
class Scene:
    image: np.ndarray  # (H0, W0, 3) float in [0, 1]
    gt_boxes: np.ndarray
    exemplars: np.ndarray
    distractor_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    id: str = ""
    # requested objects that could not be placed
    shortfall: int = 0

    @property
    def count(self) -> int:
        return len(self.gt_boxes)


@dataclass
class SceneDescriptor:
    id: str
    file: Path
    width: int
    height: int
    boxes: np.ndarray
    exemplars: np.ndarray
    distractor_boxes: np.ndarray

    def load(self) -> Scene:
        image = np.asarray(Image.open(self.file).convert("RGB"), dtype=np.float64) / 255.0
        return Scene(image, self.boxes, self.exemplars, self.distractor_boxes, self.id)


@dataclass
class SynthConfig:
    n_images: int = 100
    size: int = 128
    max_objects: int = 12
    shape_kinds: tuple = SHAPE_KINDS
    distractor_rate: float = 0.3
    k: int = 3
    min_extent: float = 10.0
    max_extent: float = 22.0
    r: int = 16


@dataclass
class ResizeDecision:
    scale_factor: float
    canvas: tuple[int, int]


# rendering ------------------------------------------------------------------

def _shape_size(kind, extent, rng):
    """Box (w, h) for a shape whose mean side length is about ``extent``."""
    if kind == "disc":
        return extent, extent
    if kind == "rectangle":
        aspect = rng.uniform(0.6, 1.6)
    elif kind == "bar":
        aspect = rng.uniform(2.8, 3.6)
        if rng.random() < 0.5:
            aspect = 1 / aspect
    else:
        aspect = 2.0 if rng.random() < 0.5 else 0.5
    w = 2 * extent * aspect / (1 + aspect)
    return w, 2 * extent - w


def _shape_mask(kind, w, h, ys, xs):
    """Boolean mask of a shape filling a ``w x h`` box; ``ys``/``xs`` are box-relative pixel centres."""
    u = (xs / w) * 2 - 1
    v = (ys / h) * 2 - 1
    if kind == "disc":
        return u ** 2 + v ** 2 <= 1
    if kind in ("rectangle", "bar"):
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    # two touching blobs along the long axis
    if w >= h:
        return ((2 * u + 1) ** 2 + v ** 2 <= 1) | ((2 * u - 1) ** 2 + v ** 2 <= 1)
    return (u ** 2 + (2 * v + 1) ** 2 <= 1) | (u ** 2 + (2 * v - 1) ** 2 <= 1)


def _background(size, rng):
    base = rng.uniform(0.15, 0.6, size=3)
    noise = gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(3, 3, 0))
    noise /= noise.std() + 1e-12
    fine = rng.normal(size=(size, size, 3))
    return np.clip(base + 0.05 * noise + 0.02 * fine, 0, 1)


def _distinct_colour(rng, avoid=None):
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, size=3)
        if avoid is None or np.abs(c - avoid).sum() > 0.9:
            return c
    return 1.0 - avoid


def _place(rng, size, kind, extent, placed, n):
    boxes = []
    attempts = 0
    while len(boxes) < n and attempts < MAX_ATTEMPTS:
        attempts += 1
        e = extent * rng.uniform(0.85, 1.15)
        w, h = _shape_size(kind, e, rng)
        w, h = max(3, int(round(w))), max(3, int(round(h)))
        if w >= size or h >= size:
            continue
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        box = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
        others = placed + boxes
        if others and pairwise_iou(box[None], np.array(others)).max() > MAX_IOU:
            continue
        boxes.append(box)
    return boxes


def _paint(image, kind, box, colour, rng):
    x0, y0, x1, y1 = (int(v) for v in box)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    mask = _shape_mask(kind, x1 - x0, y1 - y0, ys - y0 + 0.5, xs - x0 + 0.5)
    shade = np.clip(colour + rng.normal(scale=0.03, size=3), 0, 1)
    image[y0:y1, x0:x1][mask] = shade


def synth_scene(cfg: SynthConfig, rng: np.random.Generator, scene_id: str = "") -> Scene:
    size = cfg.size
    kinds = list(cfg.shape_kinds)
    target_kind = kinds[int(rng.integers(len(kinds)))]
    target_colour = _distinct_colour(rng)
    target_extent = rng.uniform(cfg.min_extent, cfg.max_extent)
    lo = min(cfg.k, cfg.max_objects)
    n_total = int(rng.integers(lo, cfg.max_objects + 1))
    n_distr = 0
    room = min(n_total - lo, n_total // 2)
    if len(kinds) > 1 and room >= 1 and rng.random() < cfg.distractor_rate:
        n_distr = int(rng.integers(1, room + 1))
    n_target = n_total - n_distr

    image = _background(size, rng)
    targets = _place(rng, size, target_kind, target_extent, [], n_target)
    if not targets:
        raise PlacementFailure(n_target, 0)
    distractors = []
    if n_distr:
        others = [k for k in kinds if k != target_kind]
        d_kind = others[int(rng.integers(len(others)))]
        d_colour = _distinct_colour(rng, avoid=target_colour)
        d_extent = rng.uniform(cfg.min_extent, cfg.max_extent)
        distractors = _place(rng, size, d_kind, d_extent, targets, n_distr)
    # paint in random order so neither class systematically occludes the other
    items = [(target_kind, b, target_colour) for b in targets]
    if distractors:
        items += [(d_kind, b, d_colour) for b in distractors]
    for i in rng.permutation(len(items)):
        _paint(image, *items[i], rng)
    image = np.round(image * 255) / 255
    gt = np.array(targets)
    return Scene(
        image=image,
        gt_boxes=gt,
        exemplars=gt[:cfg.k].copy(),
        distractor_boxes=as_boxes(distractors),
        id=scene_id,
        shortfall=(n_target - len(targets)) + (n_distr - len(distractors)),
    )


def synth_generate(cfg: SynthConfig, seed: int) -> list[Scene]:
    """Deterministic list of synthetic scenes; scene ``i`` uses seed ``(seed, i)``."""
    if cfg.size % cfg.r:
        raise ValueError(f"size {cfg.size} not divisible by r={cfg.r}")
    if cfg.max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    return [synth_scene(cfg, np.random.default_rng([seed, i]), f"{seed:04d}-{i:06d}")
            for i in range(cfg.n_images)]


# annotation files -----------------------------------------------------------

def save_dataset(scenes, root) -> Path:
    """Write PNG images and ``annotations.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scenes):
        sid = s.id or f"{i:06d}"
        rel = f"images/{sid}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / rel)
        entry = {
            "id": sid, "file": rel,
            "width": int(s.image.shape[1]), "height": int(s.image.shape[0]),
            "boxes": as_boxes(s.gt_boxes).tolist(),
            "exemplars": as_boxes(s.exemplars).tolist(),
        }
        if len(s.distractor_boxes):
            entry["distractor_boxes"] = as_boxes(s.distractor_boxes).tolist()
        entries.append(entry)
    path = root / "annotations.json"
    path.write_text(json.dumps({"version": ANNOTATION_VERSION, "images": entries}, indent=1))
    return path


def _parse_boxes(raw, where, width, height, image_id):
    if not isinstance(raw, list):
        raise SchemaError(where, "expected a list of boxes")
    out = []
    for j, b in enumerate(raw):
        loc = f"{where}[{j}]"
        if not (isinstance(b, list) and len(b) == 4 and all(isinstance(v, (int, float)) for v in b)):
            raise SchemaError(loc, "box must be [x1, y1, x2, y2]")
        x1, y1, x2, y2 = b
        if not (x1 < x2 and y1 < y2):
            raise SchemaError(loc, f"degenerate box in image {image_id!r}")
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            raise SchemaError(loc, f"box outside image {image_id!r}")
        out.append(b)
    return as_boxes(out)


def load_annotations(path) -> list[SceneDescriptor]:
    """Parse and validate an annotation file; image paths are resolved next to it."""
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict) or data.get("version") != ANNOTATION_VERSION:
        raise SchemaError("version", f"expected version {ANNOTATION_VERSION}")
    images = data.get("images")
    if not isinstance(images, list):
        raise SchemaError("images", "expected a list")
    out = []
    for i, entry in enumerate(images):
        where = f"images[{i}]"
        for key, kind in (("id", str), ("file", str), ("width", int), ("height", int),
                          ("boxes", list), ("exemplars", list)):
            if not isinstance(entry.get(key), kind):
                raise SchemaError(f"{where}.{key}", f"missing or not {kind.__name__}")
        image_id, w, h = entry["id"], entry["width"], entry["height"]
        boxes = _parse_boxes(entry["boxes"], f"{where}.boxes", w, h, image_id)
        exemplars = _parse_boxes(entry["exemplars"], f"{where}.exemplars", w, h, image_id)
        distractors = _parse_boxes(entry.get("distractor_boxes", []), f"{where}.distractor_boxes",
                                   w, h, image_id)
        file = path.parent / entry["file"]
        if not file.exists():
            raise MissingImage(str(file))
        out.append(SceneDescriptor(image_id, file, w, h, boxes, exemplars, distractors))
    return out


def load_dataset(path) -> list[Scene]:
    return [d.load() for d in load_annotations(path)]


def convert_fsc147(image_id: str, record: dict, file: str, width: int, height: int) -> dict:
    """Turn an FSC147 point annotation into an annotation-file entry.

    Each point becomes a box of the mean exemplar size centred on it, clipped
    to the image; exemplars come from ``box_examples_coordinates``.
    """
    exemplars = []
    for quad in record["box_examples_coordinates"]:
        xs = [p[0] for p in quad]
        ys = [p[1] for p in quad]
        exemplars.append([min(xs), min(ys), max(xs), max(ys)])
    ex = np.array(exemplars, dtype=np.float64)
    half_w = np.mean(ex[:, 2] - ex[:, 0]) / 2
    half_h = np.mean(ex[:, 3] - ex[:, 1]) / 2
    boxes = []
    for x, y in record["points"]:
        box = [max(0.0, x - half_w), max(0.0, y - half_h), min(width, x + half_w), min(height, y + half_h)]
        if box[0] < box[2] and box[1] < box[3]:
            boxes.append([float(v) for v in box])
    return {"id": image_id, "file": file, "width": width, "height": height,
            "boxes": boxes, "exemplars": ex.tolist()}


# test-time resizing ---------------------------------------------------------

def _round_up(n: float, r: int) -> int:
    return int(math.ceil(n / r) * r)


def mean_extent(boxes) -> float:
    b = as_boxes(boxes)
    return float(np.mean(((b[:, 2] - b[:, 0]) + (b[:, 3] - b[:, 1])) / 2))


def resize_decision_for_extent(extent: float, image_size, cfg: Optional[ResizeConfig] = None,
                               r: int = 16) -> ResizeDecision:
    cfg = cfg or ResizeConfig()
    h, w = image_size
    if extent < cfg.small_extent:
        scale = cfg.small_canvas / max(h, w)
        side = cfg.small_canvas
    else:
        scale = min(1.0, cfg.target_extent / extent)
        side = cfg.canvas
    canvas = (_round_up(max(side, round(h * scale)), r), _round_up(max(side, round(w * scale)), r))
    return ResizeDecision(scale, canvas)


def resize_policy(exemplars, image_size, cfg: Optional[ResizeConfig] = None, r: int = 16) -> ResizeDecision:
    """Scale so the mean exemplar extent suits the network.

    Small exemplars (mean of (w + h) / 2 below ``small_extent``) fit the long
    image side to ``small_canvas``; otherwise the image is downscaled (never
    upscaled) to bring the mean extent to ``target_extent`` and zero-padded to
    ``canvas``. Canvas sides are rounded up to multiples of ``r``.
    """
    if len(as_boxes(exemplars)) == 0:
        raise ValueError("resize_policy needs at least one exemplar")
    return resize_decision_for_extent(mean_extent(exemplars), image_size, cfg, r)
