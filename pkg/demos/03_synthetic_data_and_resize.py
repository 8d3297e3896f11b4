"""
Synthetic scenes and the exemplar-driven resize
===============================================

Each scene has one target shape kind repeated a few times, plus, sometimes,
distractors of another kind and colour that must not be counted. The first
three targets serve as exemplars. At test time the image is rescaled so the
exemplars reach a fixed apparent size, which is what lets one model count
both tiny and large objects.
"""

import tempfile
from pathlib import Path

import numpy as np

from geco.config import ResizeConfig
from geco.data import SynthConfig, load_dataset, resize_policy, save_dataset, synth_generate

scenes = synth_generate(SynthConfig(n_images=200, size=128, max_objects=12, distractor_rate=0.3), seed=0)

counts = np.array([s.count for s in scenes])
with_distractors = np.mean([len(s.distractor_boxes) > 0 for s in scenes])
print(f"{len(scenes)} scenes; count range {counts.min()}..{counts.max()}, mean {counts.mean():.1f}")
print(f"{with_distractors:.0%} of scenes contain distractors")

s = next(s for s in scenes if len(s.distractor_boxes))
print("\nscene", s.id, "image", s.image.shape, "count", s.count)
print("exemplars (first three targets):\n", s.exemplars.round(1))
print("distractor boxes:\n", s.distractor_boxes.round(1))

# Same seed, same bytes
again = synth_generate(SynthConfig(n_images=3), seed=0)
print("\nreproducible:", all(np.array_equal(a.image, b.image) for a, b in zip(again, scenes[:3])))

# Round trip through PNG + annotations.json
with tempfile.TemporaryDirectory() as tmp:
    save_dataset(scenes[:5], tmp)
    print("written:", sorted(p.name for p in Path(tmp).iterdir())[:4], "...")
    loaded = load_dataset(Path(tmp) / "annotations.json")
    err = max(np.abs(a.image - b.image).max() for a, b in zip(loaded, scenes))
    # synthesis already quantises to 8 bits, so the PNG round trip is exact
    print("max pixel error after PNG:", round(float(err), 4))

# The resize rule at full scale: tiny exemplars go to a large canvas,
# everything else is shrunk (never enlarged) so exemplars look about 80 px
for extent in (20, 25, 60, 100, 200):
    ex = np.array([[0, 0, extent, extent]] * 3, dtype=float)
    d = resize_policy(ex, (1024, 768))
    print(f"exemplar {extent:>3} px -> scale {d.scale_factor:.3f}, canvas {d.canvas}")

# The 128 px synthetic scenes use the same rule scaled down by ResizeConfig.toy()
toy = ResizeConfig.toy()
for s in scenes[:4]:
    d = resize_policy(s.exemplars, s.image.shape[:2], toy)
    ext = np.mean(((s.exemplars[:, 2] - s.exemplars[:, 0]) + (s.exemplars[:, 3] - s.exemplars[:, 1])) / 2)
    print(f"scene {s.id}: exemplar {ext:.1f} px -> scale {d.scale_factor:.2f}, canvas {d.canvas}")
