"""Bipartite matching of predicted to ground-truth boxes and TP/FP/FN labelling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import as_boxes, pairwise_giou, pixel_to_cell

TP, FP, FN = "TP", "FP", "FN"


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    total_cost: float


@dataclass
class LabeledEntry:
    location: tuple[int, int]
    score: Optional[float]
    box: Optional[np.ndarray]
    label: str
    gt_index: Optional[int] = None


@dataclass
class LabeledMaxima:
    entries: list[LabeledEntry] = field(default_factory=list)

    def of(self, label: str) -> list[LabeledEntry]:
        return [e for e in self.entries if e.label == label]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.of(TP)), len(self.of(FP)), len(self.of(FN))


def hungarian(cost) -> Matching:
    """Minimum-cost injective matching of size ``min(m, n)``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return Matching([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return Matching(pairs, float(cost[rows, cols].sum()))


def label_detections(maxima: Sequence, gts, grid_shape: tuple[int, int]) -> LabeledMaxima:
    """Label candidate maxima against ground truth.

    ``maxima`` holds ``(location, score, box)`` triples. Predictions matched
    by :func:`hungarian` on ``-gIoU`` become TP, the rest FP. Each unmatched
    ground truth adds an FN entry at its centre cell on the output grid.
    """
    gts = as_boxes(gts)
    out = LabeledMaxima()
    matched = {}
    if len(maxima) and len(gts):
        pred = as_boxes([m[2] for m in maxima])
        matching = hungarian(-pairwise_giou(pred, gts))
        matched = dict(matching.pairs)
    for i, (loc, score, box) in enumerate(maxima):
        loc = (int(loc[0]), int(loc[1]))
        if i in matched:
            out.entries.append(LabeledEntry(loc, float(score), np.asarray(box, float), TP, matched[i]))
        else:
            out.entries.append(LabeledEntry(loc, float(score), np.asarray(box, float), FP))
    hit = set(matched.values())
    for j, gt in enumerate(gts):
        if j in hit:
            continue
        cy, cx = (gt[1] + gt[3]) / 2, (gt[0] + gt[2]) / 2
        out.entries.append(LabeledEntry(pixel_to_cell(cy, cx, grid_shape), None, None, FN, j))
    return out
