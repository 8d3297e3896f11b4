"""Counting (MAE, RMSE) and detection (AP, AP50) metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyDataset
from .geometry import as_boxes, pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    mae: float
    rmse: float
    ap: float
    ap50: float
    per_image: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def count_errors(pred_counts, gt_counts) -> tuple[float, float]:
    """MAE and RMSE between per-image predicted and true counts.

    Either argument may hold per-image detection lists instead of integers.
    """
    if len(pred_counts) != len(gt_counts):
        raise ValueError("prediction and ground-truth lists differ in length")
    if len(pred_counts) == 0:
        raise EmptyDataset("no images to evaluate")
    n = np.array([_count(p) for p in pred_counts], dtype=np.float64)
    g = np.array([_count(p) for p in gt_counts], dtype=np.float64)
    err = n - g
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))


def _count(x) -> int:
    return int(x) if np.isscalar(x) else len(x)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope, non-increasing in recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance so that e.g. recall 0.3 counts as reaching the 0.3 sample point
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(preds, gts, iou_thresholds=(0.5,)) -> float:
    """COCO-style AP averaged over ``iou_thresholds``.

    ``preds`` is a per-image list of ``ScoredBox`` (or ``(box, score)``)
    lists and ``gts`` a per-image list of box arrays. Predictions are ranked
    globally by score (ties by image, then index); each is matched to the
    highest-IoU unmatched ground truth in its image at IoU >= threshold. The
    precision-recall curve is integrated with 101-point interpolation.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    if len(preds) == 0:
        raise EmptyDataset("no images to evaluate")
    records = []
    for img, dets in enumerate(preds):
        for idx, det in enumerate(dets):
            records.append((-float(det[1]), img, idx))
    records.sort()
    gt_boxes = [as_boxes(g) for g in gts]
    n_gt = sum(len(g) for g in gt_boxes)
    ious = [pairwise_iou(as_boxes([d[0] for d in dets]), g) if len(dets) and len(g) else None
            for dets, g in zip(preds, gt_boxes)]
    aps = []
    for thr in iou_thresholds:
        taken = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
        tp = np.zeros(len(records))
        for r, (_, img, idx) in enumerate(records):
            if ious[img] is None:
                continue
            cand = np.where(taken[img], -1.0, ious[img][idx])
            j = int(np.argmax(cand))
            if cand[j] >= thr:
                taken[img][j] = True
                tp[r] = 1.0
        aps.append(_interpolated_ap(tp, n_gt))
    return float(np.mean(aps))


def evaluate(preds, gts) -> EvalReport:
    """Count and detection metrics over one set of per-image detections."""
    mae, rmse = count_errors(preds, gts)
    per_image = [
        {"count_pred": len(p), "count_gt": len(g), "abs_err": abs(len(p) - len(g))}
        for p, g in zip(preds, gts)
    ]
    return EvalReport(
        mae=mae,
        rmse=rmse,
        ap=average_precision(preds, gts, COCO_THRESHOLDS),
        ap50=average_precision(preds, gts, (0.5,)),
        per_image=per_image,
    )
