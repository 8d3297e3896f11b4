"""Peak extraction from dense objectness maps."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import label

from .errors import DegenerateBox
from .geometry import ScoredBox, tlrb_to_box

DEFAULT_TAU = 0.5

_EIGHT = np.ones((3, 3), dtype=bool)
_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]


def _shifted(padded, dy, dx, h, w):
    return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def _peak_mask(values: np.ndarray) -> np.ndarray:
    h, w = values.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = values
    cand = np.isfinite(values)
    for dy, dx in _OFFSETS:
        cand &= values >= _shifted(padded, dy, dx, h, w)
    if not cand.any():
        return cand
    # Adjacent candidates are necessarily equal, so candidate components are
    # plateau pieces. A piece touching an equal non-candidate cell belongs to a
    # plateau with a higher neighbour somewhere and is rejected.
    pad_cand = np.zeros((h + 2, w + 2), dtype=bool)
    pad_cand[1:-1, 1:-1] = cand
    leaky = np.zeros_like(cand)
    for dy, dx in _OFFSETS:
        leaky |= cand & (values == _shifted(padded, dy, dx, h, w)) & ~_shifted(pad_cand, dy, dx, h, w)
    labels, n = label(cand, structure=_EIGHT)
    bad = np.zeros(n + 1, dtype=bool)
    bad[labels[leaky]] = True
    mask = np.zeros_like(cand)
    flat = labels.ravel()
    # first raster cell of every surviving component
    ids, first = np.unique(flat, return_index=True)
    keep = (ids > 0) & ~bad[ids]
    mask.ravel()[first[keep]] = True
    return mask


def local_maxima_3x3(values) -> list[tuple[tuple[int, int], float]]:
    """3x3 non-maxima suppression on a 2-D map.

    A cell is a maximum when it is >= all its neighbours. Flat plateaus
    (8-connected cells of equal value) count once, at their first cell in
    raster order, and only if no plateau cell has a strictly higher neighbour.
    Cells equal to ``-inf`` are never maxima. Results are sorted by score
    descending, then raster index.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[..., 0]
    rows, cols = np.nonzero(_peak_mask(values))
    scores = values[rows, cols]
    order = np.lexsort((rows * values.shape[1] + cols, -scores))
    return [((int(rows[i]), int(cols[i])), float(scores[i])) for i in order]


def filter_above_median(maxima):
    """Keep entries whose score is strictly above the median maxima score."""
    if len(maxima) == 0:
        return []
    median = np.median([m[1] for m in maxima])
    return [m for m in maxima if m[1] > median]


def extract_detections(y_o, y_bb, tau: float = DEFAULT_TAU, image_size=None) -> list[ScoredBox]:
    """Decode boxes at local maxima of the objectness map above ``tau``.

    Degenerate boxes are dropped. ``image_size`` defaults to twice the map
    size.
    """
    y_o = np.asarray(y_o, dtype=np.float64)
    if y_o.ndim == 3:
        y_o = y_o[..., 0]
    y_bb = np.asarray(y_bb, dtype=np.float64)
    if image_size is None:
        image_size = (2 * y_o.shape[0], 2 * y_o.shape[1])
    masked = np.where(y_o >= tau, y_o, -np.inf)
    out = []
    for loc, score in local_maxima_3x3(masked):
        try:
            box = tlrb_to_box(loc, y_bb[loc], image_size)
        except DegenerateBox:
            continue
        out.append(ScoredBox(box, score))
    return out
