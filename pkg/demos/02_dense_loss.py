"""
The dense detection loss
========================

Instead of regressing a density map, the detector is trained on the boxes it
actually outputs. Its maxima are matched to ground truth and the loss scores
matched boxes by gIoU while pushing objectness up at TP and FN cells and
down at FP cells. Selection happens on detached values, so gradients flow
only through the chosen cells.
"""

import numpy as np
import torch

from geco.config import GecoConfig
from geco.loss import dense_detection_loss, gauss_breakdown, default_sigma, label_field, render_gaussian_target
from geco.model import DetectionField, GeCo, image_to_tensor

torch.manual_seed(0)
np.set_printoptions(precision=2, suppress=True, linewidth=120)

# A perfect field first: three peaks that decode exactly to the three
# ground-truth boxes give gIoU 1 each and no objectness penalty
h = w = 16
image_size = (32, 32)
gts = np.array([[2.0, 2.0, 8.0, 8.0], [14.0, 10.0, 22.0, 18.0], [24.0, 22.0, 30.0, 30.0]])
y_o = torch.zeros(1, h, w, 1, dtype=torch.float64)
y_bb = torch.full((1, h, w, 4), 0.01, dtype=torch.float64)
for x0, y0, x1, y1 in gts:
    r, c = int((y0 + y1) / 4), int((x0 + x1) / 4)
    ay, ax = 2 * r + 0.5, 2 * c + 0.5
    y_o[0, r, c, 0] = 1.0
    y_bb[0, r, c] = torch.tensor([(ay - y0) / 32, (ax - x0) / 32, (x1 - ax) / 32, (y1 - ay) / 32])

# a few weak decoys so the median filter has something to remove
for r, c in [(0, 15), (15, 0), (15, 15)]:
    y_o[0, r, c, 0] = 0.01

part = dense_detection_loss(DetectionField(y_o, y_bb), gts, image_size)
print("perfect field:", {k: round(v, 6) if isinstance(v, float) else v for k, v in part.as_record().items()})

# Now an untrained model on a noise image. Its maxima land anywhere, so
# matches are poor boxes and the leftovers are FP.
cfg = GecoConfig(d=32, heads=2, d_hq=16)
model = GeCo(cfg)
image = np.random.default_rng(0).random((64, 64, 3))
gts = np.array([[4.0, 4.0, 16.0, 16.0], [30.0, 10.0, 42.0, 22.0], [40.0, 40.0, 54.0, 52.0]])
x = image_to_tensor(image)
field = model(x, torch.as_tensor(gts[:2], dtype=torch.float32)[None])

labeled = label_field(field.y_o[0, ..., 0].detach().double().numpy(),
                      field.y_bb[0].detach().double().numpy(), gts, (64, 64))
print("\nuntrained labels (TP, FP, FN):", labeled.counts)

part = dense_detection_loss(field, gts, (64, 64))
part.total.backward()
touched = sum(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in model.parameters())
print("loss", round(part.total.item(), 4), "parameters receiving gradient:", touched,
      "of", len(list(model.parameters())))

# The Gaussian surrogate used for pretraining: unit peaks at gt centres with
# sigma a quarter of the mean exemplar size in output cells
sigma = default_sigma(gts[:2])
target = render_gaussian_target(gts, 32, 32, sigma)
print("\nsigma =", sigma, "cells; target peak values at centres:",
      target[5, 5].round(2), target[8, 18].round(2), target[23, 23].round(2))
model.zero_grad()
part = gauss_breakdown(model(x, torch.as_tensor(gts[:2], dtype=torch.float32)[None]), gts, sigma, (64, 64))
print("gauss mse", round(part.tp_fn_objectness_term.item(), 4), "giou term", round(part.giou_term.item(), 4))
