"""Inference, training loops and dataset evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import GecoConfig
from .data import ResizeDecision, Scene, mean_extent, resize_decision_for_extent, resize_policy
from .errors import EmptyDataset, NonFiniteLoss
from .geometry import ScoredBox, as_boxes, nms_boxes
from .loss import train_step
from .maxima import extract_detections
from .metrics import EvalReport, evaluate
from .model import GeCo, image_to_tensor

log = logging.getLogger(__name__)

MODES = ("few", "one", "zero")


@dataclass
class InferenceResult:
    boxes: list[ScoredBox]
    resize: ResizeDecision

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_mae: float = math.inf


def _round_up(n, r):
    return int(math.ceil(n / r) * r)


def native_decision(image_size, r: int) -> ResizeDecision:
    h, w = image_size
    return ResizeDecision(1.0, (_round_up(h, r), _round_up(w, r)))


def prepare_image(image: np.ndarray, decision: ResizeDecision, dtype=torch.float32):
    """Rescale an ``(H, W, 3)`` image and zero-pad it to the decision's canvas.

    Returns the ``(1, 3, Hc, Wc)`` tensor and the realised per-axis scales
    ``(sy, sx)``, which differ slightly from ``scale_factor`` after rounding.
    """
    h, w = image.shape[:2]
    x = image_to_tensor(image, dtype)
    nh = max(1, int(round(h * decision.scale_factor)))
    nw = max(1, int(round(w * decision.scale_factor)))
    if (nh, nw) != (h, w):
        x = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False,
                          antialias=decision.scale_factor < 1)
    ch, cw = decision.canvas
    x = F.pad(x, (0, max(0, cw - nw), 0, max(0, ch - nh)))[..., :ch, :cw]
    return x, (nh / h, nw / w)


def _scale_boxes(boxes, sy, sx):
    return as_boxes(boxes) * np.array([sx, sy, sx, sy])


def _run(model: GeCo, image, exemplars, decision: ResizeDecision, cfg: GecoConfig) -> InferenceResult:
    x, (sy, sx) = prepare_image(image, decision, next(model.parameters()).dtype)
    ex = None
    if exemplars is not None:
        ex = torch.as_tensor(_scale_boxes(exemplars, sy, sx), dtype=x.dtype)[None]
    model.eval()
    with torch.no_grad():
        out = model(x, ex)
    dets = extract_detections(out.y_o[0].double().numpy(), out.y_bb[0].double().numpy(),
                              cfg.tau, tuple(x.shape[-2:]))
    keep = nms_boxes(dets, cfg.dedup_iou)
    h, w = image.shape[:2]
    boxes = []
    for i in keep:
        b = dets[i].box / np.array([sx, sy, sx, sy])
        b = np.clip(b, 0, [w, h, w, h])
        if b[0] < b[2] and b[1] < b[3]:
            boxes.append(ScoredBox(b, dets[i].score))
    return InferenceResult(boxes, decision)


def infer(model: GeCo, image: np.ndarray, exemplars=None, cfg: Optional[GecoConfig] = None) -> InferenceResult:
    """Detect target objects in an ``(H, W, 3)`` image.

    With exemplars the image is rescaled by :func:`resize_policy`; without them
    it is processed at native scale. Boxes are returned in original image
    coordinates after duplicate removal.
    """
    cfg = cfg or model.cfg
    if exemplars is None or len(as_boxes(exemplars)) == 0:
        return _run(model, image, None, native_decision(image.shape[:2], cfg.r), cfg)
    decision = resize_policy(exemplars, image.shape[:2], cfg.resize, cfg.r)
    return _run(model, image, exemplars, decision, cfg)


def infer_zero_shot_two_pass(model: GeCo, image: np.ndarray, cfg: Optional[GecoConfig] = None) -> InferenceResult:
    """Zero-shot inference: estimate object size on a first pass, then rescale and rerun."""
    cfg = cfg or model.cfg
    first = infer(model, image, None, cfg)
    if not first.boxes:
        return first
    extent = mean_extent([b.box for b in first.boxes])
    decision = resize_decision_for_extent(extent, image.shape[:2], cfg.resize, cfg.r)
    return _run(model, image, None, decision, cfg)


def evaluate_dataset(scenes, model: GeCo, cfg: Optional[GecoConfig] = None, mode: str = "few",
                     two_pass: bool = True) -> EvalReport:
    """Run inference over ``scenes`` and score it.

    ``few`` uses up to three exemplars, ``one`` only the first, ``zero`` none
    (two-pass unless ``two_pass`` is false).
    """
    cfg = cfg or model.cfg
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(scenes) == 0:
        raise EmptyDataset("no scenes to evaluate")
    preds, gts = [], []
    for s in scenes:
        if mode == "few":
            res = infer(model, s.image, s.exemplars[:3], cfg)
        elif mode == "one":
            res = infer(model, s.image, s.exemplars[:1], cfg)
        elif two_pass:
            res = infer_zero_shot_two_pass(model, s.image, cfg)
        else:
            res = infer(model, s.image, None, cfg)
        preds.append([(b.box, b.score) for b in res.boxes])
        gts.append(s.gt_boxes)
    return evaluate(preds, gts)


# training -------------------------------------------------------------------

def make_batch(scenes, rng: np.random.Generator, cfg: GecoConfig, zero_shot: bool = False):
    """Scale-augment scenes and pad them to one shared canvas.

    Returns ``(image, exemplars, gts)`` triples ready for :func:`train_step`.
    """
    lo, hi = cfg.scale_aug
    scaled = []
    for s in scenes:
        f = float(rng.uniform(lo, hi))
        h, w = s.image.shape[:2]
        x, (sy, sx) = prepare_image(s.image, ResizeDecision(f, (round(h * f), round(w * f))))
        scaled.append((x[0], _scale_boxes(s.exemplars, sy, sx), _scale_boxes(s.gt_boxes, sy, sx)))
    ch = _round_up(max(cfg.resize.canvas, max(t[0].shape[1] for t in scaled)), cfg.r)
    cw = _round_up(max(cfg.resize.canvas, max(t[0].shape[2] for t in scaled)), cfg.r)
    k = min(len(t[1]) for t in scaled)
    batch = []
    for img, ex, gts in scaled:
        img = F.pad(img, (0, cw - img.shape[2], 0, ch - img.shape[1]))
        batch.append((img, None if zero_shot else ex[:k], gts))
    return batch


def _log_step(step_log, record):
    line = json.dumps(record, sort_keys=True)
    log.debug(line)
    if step_log is not None:
        step_log.write(line + "\n")


def _train_epochs(model, optimizer, scenes, cfg, mode, n_epochs, history, val, phase,
                  eval_mode="few", zero_shot=False, step_log=None, epoch_offset=0, scheduler=None):
    best_state = None
    step = sum(e["steps"] for e in history.epochs)
    for e in range(n_epochs):
        epoch = epoch_offset + e
        rng = np.random.default_rng([cfg.seed, epoch, 1 if zero_shot else 0])
        order = rng.permutation(len(scenes))
        totals = []
        n_steps = 0
        for start in range(0, len(order), cfg.batch):
            batch = make_batch([scenes[i] for i in order[start:start + cfg.batch]], rng, cfg, zero_shot)
            try:
                br = train_step(model, batch, optimizer, mode, cfg.sigma_pretrain, cfg.grad_clip)
            except NonFiniteLoss as exc:
                exc.history = history
                raise
            step += 1
            n_steps += 1
            totals.append(br.total.item())
            tp, fp, fn = br.counts
            _log_step(step_log, {"step": step, "mode": mode, "total": br.total.item(),
                                 "giou_term": br.giou_term.item(), "tp": tp, "fp": fp, "fn": fn,
                                 "lr": optimizer.param_groups[0]["lr"], "grad_norm": br.grad_norm})
            if scheduler is not None:
                scheduler.step()
        record = {"epoch": epoch, "phase": phase, "mode": mode, "steps": n_steps,
                  "train_loss": float(np.mean(totals)) if totals else float("nan")}
        if val:
            report = evaluate_dataset(val, model, cfg, eval_mode)
            record.update(val_mae=report.mae, val_rmse=report.rmse, val_ap=report.ap, val_ap50=report.ap50)
            if report.mae <= history.best_val_mae:
                history.best_val_mae = report.mae
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        history.epochs.append(record)
        log.info("epoch %d (%s/%s) loss %.4f val_mae %s", epoch, phase, mode, record["train_loss"],
                 record.get("val_mae"))
    return best_state


def fit(train_scenes, val_scenes, cfg: GecoConfig, *, main_mode: str = "dense",
        model: Optional[GeCo] = None, step_log=None):
    """Gaussian-loss pretraining followed by main training.

    Runs ``cfg.pretrain_epochs`` epochs in ``gauss`` mode, then ``cfg.epochs``
    in ``main_mode``, evaluating few-shot val MAE after every epoch. The
    parameters with the lowest val MAE are loaded back into the returned
    model. ``step_log`` is an optional text stream receiving one JSON record
    per step.
    """
    if not train_scenes or not val_scenes:
        raise EmptyDataset("fit needs non-empty train and val splits")
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    torch.manual_seed(cfg.seed)
    model = model if model is not None else GeCo(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainingHistory()
    best = None
    offset = 0
    for phase, mode, n in (("pretrain", "gauss", cfg.pretrain_epochs), ("main", main_mode, cfg.epochs)):
        scheduler = None
        if phase == "main" and cfg.lr_schedule == "cosine" and n > 0:
            steps = n * -(-len(train_scenes) // cfg.batch)
            scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)
        state = _train_epochs(model, optimizer, train_scenes, cfg, mode, n, history, val_scenes, phase,
                              step_log=step_log, epoch_offset=offset, scheduler=scheduler)
        offset += n
        best = state if state is not None else best
    if best is not None:
        model.load_state_dict(best)
    return model, history


def fit_zero_shot(model: GeCo, train_scenes, cfg: GecoConfig, val_scenes=None, step_log=None):
    """Train only the zero-shot prototype and its attention block.

    Every other parameter is frozen (``requires_grad`` off) and left
    bit-identical. With ``val_scenes`` the best zero-shot val MAE epoch is
    kept.
    """
    if not train_scenes:
        raise EmptyDataset("fit_zero_shot needs training scenes")
    torch.manual_seed(cfg.seed)
    trainable = {id(p) for p in model.zero_shot_parameters()}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    optimizer = torch.optim.AdamW(model.zero_shot_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainingHistory()
    try:
        best = _train_epochs(model, optimizer, train_scenes, cfg, "dense", cfg.zero_shot_epochs, history,
                             val_scenes, "zero-shot", eval_mode="zero", zero_shot=True, step_log=step_log)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    if best is not None:
        model.load_state_dict(best)
    return model, history
