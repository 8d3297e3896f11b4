"""
Train a small counter and look at what it finds
================================================

A deliberately small model and dataset so this finishes in a few minutes on
a CPU. Training is Gaussian pretraining followed by the dense detection loss;
the checkpoint with the best validation MAE is kept. The last cell draws the
detections for one validation scene into demo_overlay.png.

    python demos/04_train_and_count.py [epochs]
"""

import logging
import sys

import numpy as np

from geco.cli import draw_overlay
from geco.config import GecoConfig, ResizeConfig
from geco.data import SynthConfig, synth_generate
from geco.pipeline import evaluate_dataset, fit, fit_zero_shot, infer, infer_zero_shot_two_pass

logging.basicConfig(level=logging.INFO, format="%(message)s")

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
synth = SynthConfig(size=96, max_objects=8, distractor_rate=0.3, min_extent=8, max_extent=16)
synth.n_images = 800
train = synth_generate(synth, seed=0)
synth.n_images = 40
val = synth_generate(synth, seed=1)

cfg = GecoConfig(d=32, heads=2, d_hq=16, lr=1e-3, batch=8, pretrain_epochs=1, epochs=epochs,
                 lr_schedule="cosine", grad_clip=50.0,
                 resize=ResizeConfig(small_extent=5, small_canvas=128, target_extent=16, canvas=96))
model, history = fit(train, val, cfg)
print("\nval MAE per epoch:", [round(e["val_mae"], 2) for e in history.epochs])

# Zero-shot needs its own prototype, fitted on single-class scenes with the
# rest of the network frozen
single = SynthConfig(**{**synth.__dict__, "n_images": 200, "distractor_rate": 0.0})
cfg.zero_shot_epochs = 2
model, _ = fit_zero_shot(model, synth_generate(single, seed=2), cfg)

# Few-shot, one-shot and zero-shot on the same validation scenes
for mode in ("few", "one", "zero"):
    rep = evaluate_dataset(val, model, mode=mode)
    print(f"{mode:>4}: MAE {rep.mae:.2f}  RMSE {rep.rmse:.2f}  AP {rep.ap:.3f}  AP50 {rep.ap50:.3f}")

# One scene up close: predicted against true count, then an overlay
s = next(s for s in val if len(s.distractor_boxes))
res = infer(model, s.image, s.exemplars)
print(f"\nscene {s.id}: predicted {len(res.boxes)}, true {s.count}, distractors {len(s.distractor_boxes)}")
print("zero-shot two-pass count:", len(infer_zero_shot_two_pass(model, s.image).boxes))
draw_overlay(s.image, [b.box for b in res.boxes], s.exemplars).save("demo_overlay.png")
print("wrote demo_overlay.png")
