"""
Boxes, maxima and matching
==========================

The detection head predicts, at every cell of a half-resolution grid, an
objectness score and four distances (top, left, right, bottom) from the
cell's anchor to the box edges. This walk-through decodes such a field by
hand and then labels its maxima against ground truth the way the training
loss does.
"""

import numpy as np

from geco.assignment import label_detections
from geco.geometry import anchor_point, box_to_tlrb, giou, iou, nms_boxes, tlrb_to_box
from geco.maxima import extract_detections, filter_above_median, local_maxima_3x3

np.set_printoptions(precision=3, suppress=True)

# gIoU extends IoU with a penalty for empty space in the enclosing box,
# so it still ranks boxes that do not overlap at all
a, b, c = [0, 0, 2, 2], [1, 1, 3, 3], [2, 2, 3, 3]
print("iou(a, b) =", iou(a, b), " giou(a, b) =", giou(a, b), "(-5/63)")
print("iou(a, c) =", iou(a, c), " giou(a, c) =", giou([0, 0, 1, 1], c), "(-7/9)")

# A cell (row, col) on the stride-2 grid has its anchor at (2 row + 0.5, 2 col + 0.5).
# tlrb values are fractions of the image height (t, b) and width (l, r).
image = (32, 32)
loc = (5, 7)
print("anchor of", loc, "=", anchor_point(loc))
box = np.array([10.0, 6.0, 20.0, 16.0])
tlrb = box_to_tlrb(loc, box, image)
print("tlrb", tlrb, "decodes back to", tlrb_to_box(loc, tlrb, image))

# A toy 16x16 objectness map: two clean peaks, one weak bump and noise
rng = np.random.default_rng(0)
y_o = rng.uniform(0, 0.05, size=(16, 16))
y_o[5, 7], y_o[10, 3], y_o[12, 12] = 0.95, 0.8, 0.3
y_bb = np.full((16, 16, 4), 0.08)
y_bb[5, 7] = tlrb

maxima = local_maxima_3x3(y_o)
print(f"\n{len(maxima)} local maxima; strongest:", [(m[0], round(m[1], 2)) for m in maxima[:4]])

# Training keeps only maxima strictly above the median maximum score
kept = filter_above_median(maxima)
print(f"{len(kept)} survive the median filter")

# Inference instead thresholds at tau and decodes boxes at each surviving peak
dets = extract_detections(y_o, y_bb, tau=0.5, image_size=image)
for d in dets:
    print("detection", d.box, "score", round(d.score, 2))

# Two near-identical boxes collapse to one under box NMS at IoU 0.5
dets.append(type(dets[0])(dets[0].box + 0.5, 0.7))
print("after NMS keep indices:", nms_boxes(dets, 0.5))

# Label the surviving maxima: Hungarian matching on -gIoU gives TP, the rest
# are FP, and ground truths nobody matched become FN at their centre cell
gts = np.array([[10.0, 6.0, 20.0, 16.0], [24.0, 2.0, 30.0, 10.0]])
cands = [(loc, score, tlrb_to_box(loc, y_bb[loc], image)) for loc, score in kept]
labeled = label_detections(cands, gts, y_o.shape)
for e in labeled.entries[:6]:
    print(f"{e.label:>2} at {e.location} score {e.score:.2f} gt {e.gt_index}")
print("TP/FP/FN counts:", labeled.counts)
