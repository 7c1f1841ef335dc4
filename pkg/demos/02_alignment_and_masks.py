"""
From a synthetic scene to alignment masks
=========================================

Render a moving garment patch, track points on it with the scene oracle,
corrupt a fifth of them and turn the result into the soft mask pyramid the
denoiser consumes. The alignment is also written in the text format that
``pointvto infer --points`` reads.
"""
import os
import tempfile

import numpy as np

from pointvto.io import write_frames
from pointvto.points import (align_from_oracle, build_pyramid, build_soft_masks, perturb_alignment,
                             read_alignment, write_alignment)
from pointvto.scene import gen_synthetic_scene

truth, x_gt, x_cf = gen_synthetic_scene(seed=3, difficulty="hard")
print("frames", x_gt.shape, "garment", truth.garment_a, "swapped for", truth.garment_b)

# anchor on the first frame where the patch shows, sample 8 points there and track them
anchor = truth.visible_frames()[0]
align = align_from_oracle(truth, truth.visible_mask(anchor), anchor, 8, 8, seed=0)
print("valid points per frame:", align.valid.sum(axis=1))

noisy = perturb_alignment(align, 0.2, seed=1, frame_hw=truth.frame_hw, garment_hw=truth.garment_hw)
moved = np.any(noisy.frame_points != align.frame_points, axis=(0, 2))
print("pairs replaced at 20% error:", int(moved.sum()))

# soft masks: one Gaussian bump per valid point, then max-pooled per level
pyr = build_pyramid(build_soft_masks(noisy, truth.frame_hw, truth.garment_hw), [1, 2, 4])
for f in pyr.factors:
    print(f"level 1/{f}: person mask {tuple(pyr[f].person.shape)}")

out = tempfile.mkdtemp(prefix="pointvto_demo_")
write_alignment(os.path.join(out, "alignment.txt"), noisy)
assert read_alignment(os.path.join(out, "alignment.txt")) == noisy
write_frames(os.path.join(out, "gt"), x_gt)
write_frames(os.path.join(out, "counterfactual"), x_cf)
print("wrote", out)
