"""Training objectives: the dense detection loss and the Gaussian surrogate.

Both losses work on one image of a :class:`~geco.model.DetectionField`
(selected with ``index``). Location selection and TP/FP/FN labelling are
computed on detached values every call and treated as constants; gradients
flow through the objectness values and tlrb parameters at the selected cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .assignment import FN, FP, TP, label_detections
from .errors import NonFiniteLoss
from .geometry import OUTPUT_STRIDE, as_boxes, decode_tlrb, pixel_to_cell
from .maxima import filter_above_median, local_maxima_3x3


@dataclass
class LossBreakdown:
    total: torch.Tensor
    giou_term: torch.Tensor
    tp_fn_objectness_term: torch.Tensor
    fp_objectness_term: torch.Tensor
    counts: tuple[int, int, int]
    # global gradient norm before clipping, set by train_step
    grad_norm: Optional[float] = None

    def as_record(self) -> dict:
        tp, fp, fn = self.counts
        return {
            "total": self.total.item(), "giou_term": self.giou_term.item(),
            "tp_fn_objectness_term": self.tp_fn_objectness_term.item(),
            "fp_objectness_term": self.fp_objectness_term.item(),
            "tp": tp, "fp": fp, "fn": fn,
        }


def decode_boxes(tlrb: torch.Tensor, locs: torch.Tensor, image_size) -> torch.Tensor:
    """Differentiable counterpart of :func:`geco.geometry.decode_tlrb`."""
    h0, w0 = image_size
    cy = locs[:, 0].to(tlrb.dtype) * OUTPUT_STRIDE + 0.5
    cx = locs[:, 1].to(tlrb.dtype) * OUTPUT_STRIDE + 0.5
    t, l, r, b = tlrb.unbind(-1)
    return torch.stack([
        (cx - l * w0).clamp(0, w0), (cy - t * h0).clamp(0, h0),
        (cx + r * w0).clamp(0, w0), (cy + b * h0).clamp(0, h0),
    ], dim=-1)


def giou_aligned(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalised IoU of row-aligned box pairs."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    enc = torch.maximum(a[:, 2:], b[:, 2:]) - torch.minimum(a[:, :2], b[:, :2])
    enc_area = enc[:, 0] * enc[:, 1]
    return inter / union - (enc_area - union) / enc_area


def _select(field, index):
    y_o = field.y_o[index]
    if y_o.dim() == 3:
        y_o = y_o[..., 0]
    return y_o, field.y_bb[index]


def _image_size(y_o, image_size):
    if image_size is None:
        return OUTPUT_STRIDE * y_o.shape[0], OUTPUT_STRIDE * y_o.shape[1]
    return tuple(image_size)


def _locs(entries, device):
    if not entries:
        return torch.zeros((0, 2), dtype=torch.long, device=device)
    return torch.tensor([e.location for e in entries], dtype=torch.long, device=device)


def label_field(y_o: np.ndarray, y_bb: np.ndarray, gts, image_size):
    """Median-filtered local maxima of ``y_o`` labelled against ``gts``."""
    maxima = filter_above_median(local_maxima_3x3(y_o))
    if maxima:
        locs = np.array([m[0] for m in maxima])
        boxes, valid = decode_tlrb(locs, y_bb[locs[:, 0], locs[:, 1]], image_size)
        cands = [(m[0], m[1], boxes[i]) for i, m in enumerate(maxima) if valid[i]]
    else:
        cands = []
    return label_detections(cands, gts, y_o.shape)


def dense_detection_loss(field, gts, image_size=None, index: int = 0) -> LossBreakdown:
    """Dense detection loss for image ``index`` of ``field``.

    total = -sum_TP gIoU(box_i, gt_HUN(i)) + sum_{TP,FN} (y_o - 1)^2 + sum_FP y_o^2
    """
    y_o, y_bb = _select(field, index)
    image_size = _image_size(y_o, image_size)
    gts = as_boxes(gts)
    labeled = label_field(y_o.detach().cpu().double().numpy(), y_bb.detach().cpu().double().numpy(),
                          gts, image_size)
    tp, fp, fn = labeled.of(TP), labeled.of(FP), labeled.of(FN)
    dev = y_o.device
    zero = y_o.sum() * 0
    if tp:
        tp_locs = _locs(tp, dev)
        pred = decode_boxes(y_bb[tp_locs[:, 0], tp_locs[:, 1]], tp_locs, image_size)
        target = torch.as_tensor(gts[[e.gt_index for e in tp]], dtype=pred.dtype, device=dev)
        giou_term = -giou_aligned(pred, target).sum()
    else:
        giou_term = zero
    pos = _locs(tp + fn, dev)
    neg = _locs(fp, dev)
    pos_term = ((y_o[pos[:, 0], pos[:, 1]] - 1) ** 2).sum() if len(pos) else zero
    neg_term = (y_o[neg[:, 0], neg[:, 1]] ** 2).sum() if len(neg) else zero
    return LossBreakdown(giou_term + pos_term + neg_term, giou_term, pos_term, neg_term,
                         (len(tp), len(fp), len(fn)))


def default_sigma(exemplars) -> float:
    """Gaussian width in output cells: a quarter of the mean exemplar extent, at least 1."""
    ex = as_boxes(exemplars)
    if len(ex) == 0:
        return 1.0
    extent = np.mean(((ex[:, 2] - ex[:, 0]) + (ex[:, 3] - ex[:, 1])) / 2) / OUTPUT_STRIDE
    return max(1.0, float(extent) / 4)


def render_gaussian_target(gts, h: int, w: int, sigma: float) -> np.ndarray:
    """Unit-peak Gaussians at the gt centre cells, combined by per-cell max."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((h, w))
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for gt in as_boxes(gts):
        r, c = pixel_to_cell((gt[1] + gt[3]) / 2, (gt[0] + gt[2]) / 2, (h, w))
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
        np.maximum(out, g, out=out)
    return out


def gauss_breakdown(field, gts, sigma: float, image_size=None, index: int = 0) -> LossBreakdown:
    """Gaussian-target MSE plus the gIoU term at each gt centre cell."""
    y_o, y_bb = _select(field, index)
    image_size = _image_size(y_o, image_size)
    gts = as_boxes(gts)
    target = torch.as_tensor(render_gaussian_target(gts, *y_o.shape, sigma), dtype=y_o.dtype, device=y_o.device)
    mse = ((y_o - target) ** 2).mean()
    if len(gts):
        centres = [pixel_to_cell((g[1] + g[3]) / 2, (g[0] + g[2]) / 2, y_o.shape) for g in gts]
        locs = torch.tensor(centres, dtype=torch.long, device=y_o.device)
        pred = decode_boxes(y_bb[locs[:, 0], locs[:, 1]], locs, image_size)
        giou_term = -giou_aligned(pred, torch.as_tensor(gts, dtype=pred.dtype, device=y_o.device)).sum()
    else:
        giou_term = mse * 0
    return LossBreakdown(mse + giou_term, giou_term, mse, mse * 0, (len(gts), 0, 0))


def gauss_surrogate_loss(field, gts, sigma: float, image_size=None, index: int = 0) -> torch.Tensor:
    return gauss_breakdown(field, gts, sigma, image_size, index).total


def train_step(model, batch, optimizer, mode: str = "dense", sigma: Optional[float] = None,
               grad_clip: Optional[float] = None) -> LossBreakdown:
    """One optimisation step on a batch of equally sized samples.

    ``batch`` is a sequence of ``(image, exemplars, gts)`` with ``image`` a
    ``(3, H0, W0)`` tensor and ``exemplars`` a ``(k, 4)`` array, or ``None``
    for the zero-shot path. The mean of per-sample losses is minimised;
    ``NonFiniteLoss`` is raised before any parameter update.
    """
    if mode not in ("dense", "gauss"):
        raise ValueError(f"unknown loss mode {mode!r}")
    model.train()
    dtype = next(model.parameters()).dtype
    images = torch.stack([torch.as_tensor(s[0], dtype=dtype) for s in batch])
    if batch[0][1] is None:
        exemplars = None
    else:
        exemplars = torch.stack([torch.as_tensor(np.asarray(s[1]), dtype=dtype) for s in batch])
    field = model(images, exemplars)
    image_size = tuple(images.shape[-2:])
    parts = []
    for i, (_, ex, gts) in enumerate(batch):
        if mode == "dense":
            part = dense_detection_loss(field, gts, image_size, index=i)
        else:
            s = sigma if sigma is not None else default_sigma(ex if ex is not None else gts)
            part = gauss_breakdown(field, gts, s, image_size, index=i)
        if not torch.isfinite(part.total):
            raise NonFiniteLoss(i, part.total.item())
        parts.append(part)
    n = len(parts)
    total = sum(p.total for p in parts) / n
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip if grad_clip is not None else float("inf"))
    optimizer.step()
    mean = lambda name: sum(getattr(p, name).detach() for p in parts) / n
    counts = tuple(sum(p.counts[j] for p in parts) for j in range(3))
    return LossBreakdown(total.detach(), mean("giou_term"), mean("tp_fn_objectness_term"),
                         mean("fp_objectness_term"), counts, norm.item())
