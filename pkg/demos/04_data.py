"""
Synthetic clips and augmented pairs
===================================

Each clip is a coloured shape gliding over a textured background. Training
pairs are two frames from the first and last temporal segments, each
independently augmented.
"""
import sys
from pathlib import Path

import numpy as np

from asc.data import AugmentConfig, DataConfig, augment, export_clip, generate_clip, sample_frames, training_pair
from asc.patching import write_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/data")

clip = generate_clip(seed=11, T=8)
print(clip.kind, "label", clip.label, "color", np.round(clip.color, 2))
print("frames written:", [p.name for p in export_clip(clip, out / "clip")])

rng = np.random.default_rng(0)
print("one index per segment:", sample_frames(8, rng), sample_frames(8, rng))

# the augmentation pipeline: crop-resize, flip, jitter, grayscale, blur
cfg = AugmentConfig()
for k in range(4):
    view = augment(clip.frames[0], cfg, seed=k)
    write_ppm(out / f"view_{k}.ppm", view)
print("augmented views in", out)

fi, fj, label = training_pair(5, 6, DataConfig(), cfg)
print("pair", fi.shape, fj.shape, "label", label)
