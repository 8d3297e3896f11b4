"""Axis-aligned box arithmetic.

Boxes are ``[x1, y1, x2, y2]`` in continuous pixel coordinates with
``area = (x2 - x1) * (y2 - y1)`` (no +1 pixel convention). Collections of
boxes are ``(N, 4)`` float arrays.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateBox

OUTPUT_STRIDE = 2


class ScoredBox(NamedTuple):
    box: np.ndarray
    score: float


def as_box(box: Sequence[float]) -> np.ndarray:
    """Return ``box`` as a float array, raising ``DegenerateBox`` if invalid."""
    b = np.asarray(box, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(b)):
        raise DegenerateBox(f"non-finite box {b.tolist()}")
    if not (b[0] < b[2] and b[1] < b[3]):
        raise DegenerateBox(f"box {b.tolist()} has non-positive extent")
    return b


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.size == 0:
        return np.zeros((0, 4))
    return b.reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(pairwise_iou(as_box(a)[None], as_box(b)[None])[0, 0])


def giou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(pairwise_giou(as_box(a)[None], as_box(b)[None])[0, 0])


def _inter_union(a: np.ndarray, b: np.ndarray):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter, union


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a, b = as_boxes(a), as_boxes(b)
    inter, union = _inter_union(a, b)
    return inter / union


def pairwise_giou(a, b) -> np.ndarray:
    a, b = as_boxes(a), as_boxes(b)
    inter, union = _inter_union(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    enclosure = wh[..., 0] * wh[..., 1]
    return inter / union - (enclosure - union) / enclosure


def anchor_point(loc: tuple[int, int]) -> tuple[float, float]:
    """Image-pixel ``(y, x)`` of an output-grid cell centre."""
    row, col = loc
    return row * OUTPUT_STRIDE + 0.5, col * OUTPUT_STRIDE + 0.5


def pixel_to_cell(y: float, x: float, grid_shape: tuple[int, int]) -> tuple[int, int]:
    """Nearest output-grid cell to an image-pixel point, clipped in-grid."""
    h, w = grid_shape
    row = int(np.floor((y - 0.5) / OUTPUT_STRIDE + 0.5))
    col = int(np.floor((x - 0.5) / OUTPUT_STRIDE + 0.5))
    return min(max(row, 0), h - 1), min(max(col, 0), w - 1)


def decode_tlrb(locs, tlrb, image_size: tuple[int, int]):
    """Vectorised tlrb decoding.

    ``locs`` is ``(N, 2)`` output-grid ``(row, col)``, ``tlrb`` is ``(N, 4)``
    fractions of the image height/width. Returns clipped ``(N, 4)`` boxes and
    a mask of the non-degenerate ones.
    """
    h0, w0 = image_size
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 2)
    t, l, r, b = np.asarray(tlrb, dtype=np.float64).reshape(-1, 4).T
    cy = locs[:, 0] * OUTPUT_STRIDE + 0.5
    cx = locs[:, 1] * OUTPUT_STRIDE + 0.5
    boxes = np.stack([
        np.clip(cx - l * w0, 0.0, w0),
        np.clip(cy - t * h0, 0.0, h0),
        np.clip(cx + r * w0, 0.0, w0),
        np.clip(cy + b * h0, 0.0, h0),
    ], axis=1)
    valid = (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3])
    return boxes, valid


def tlrb_to_box(loc: tuple[int, int], tlrb: Sequence[float],
                image_size: tuple[int, int]) -> np.ndarray:
    """Decode ``(top, left, right, bottom)`` fractions at an output cell.

    Distances are fractions of the full image height (top, bottom) and width
    (left, right), measured from the cell's anchor pixel. The box is clipped
    to the image; ``DegenerateBox`` is raised when clipping leaves no area.
    """
    boxes, valid = decode_tlrb([loc], [tlrb], image_size)
    if not valid[0]:
        raise DegenerateBox(f"tlrb {tuple(tlrb)} at {tuple(loc)} collapses to {boxes[0].tolist()}")
    return boxes[0]


def box_to_tlrb(loc: tuple[int, int], box: Sequence[float],
                image_size: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`tlrb_to_box` for boxes that need no clipping."""
    h0, w0 = image_size
    cy, cx = anchor_point(loc)
    x1, y1, x2, y2 = (float(v) for v in box)
    return np.array([(cy - y1) / h0, (cx - x1) / w0, (x2 - cx) / w0, (y2 - cy) / h0])


def nms_boxes(dets: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (lower index first on ties); a box
    is kept unless its IoU with an already kept box exceeds ``iou_threshold``.
    Returns kept input indices in visiting order.
    """
    if len(dets) == 0:
        return []
    boxes = as_boxes([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep
