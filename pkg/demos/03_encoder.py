"""
Images through the encoder
==========================

A 32x32 frame becomes 64 patch tokens; grouping layers after attention in
blocks 0 and 2 shrink the token set before the final mean pool.
"""
import numpy as np

from asc.data import generate_clip
from asc.encoder import EncoderConfig, encode_images, init_encoder_params
from asc.patching import assemble_patches, extract_patches

clip = generate_clip(seed=3)
frame = clip.frames[0]
print("clip of a", clip.kind, "moving with velocity", np.round(clip.velocity, 2))

patches = extract_patches(frame, 4)
print("patches", patches.shape)  # (64, 48)
assert np.array_equal(assemble_patches(patches, 32, 32, 4), frame)

cfg = EncoderConfig()
params = init_encoder_params(cfg, np.random.default_rng(0))
frames = np.stack([generate_clip(s).frames[0] for s in range(8)])
out = encode_images(frames, params, cfg)
print("representation", out.rep.shape)
print("mean token count after each block", out.token_trace)
for layer, g in zip(cfg.asc_positions, out.layers):
    print(f"block {layer}: per-image counts {[p.count for p in g.partitions]}")
