"""
Local contrast normalization and patch sampling
===============================================

A photo is reduced to grayscale, normalized by the mean and standard
deviation of a 7x7 neighbourhood around every pixel, then cropped into
64x64 patches on a stride-160 grid. This walk-through shows why the
normalization removes global brightness and what the patch grid looks like.
"""

import numpy as np

from sceneiqa.data import SynthSpec, render_base_image
from sceneiqa.imaging import (LcnParams, extract_patches, local_std_map, normalize,
                              patch_count, to_grayscale)

rng = np.random.default_rng(0)
rgb = render_base_image(rng, (224, 384), "balanced")
gray = np.round(to_grayscale(rgb))
print("gray image", gray.shape, "mean %.1f" % gray.mean())

# Each pixel becomes (I - mu) / (sigma + C). The stabilizer C keeps flat
# regions from blowing up.
norm = normalize(gray, LcnParams())
print("normalized range %.2f .. %.2f" % (norm.min(), norm.max()))

# Adding a constant brightness changes nothing: mean and deviation shift together.
# Leave headroom first so no pixel clips at 255.
dim = np.round(gray * 0.8)
print("offset invariant:", np.array_equal(normalize(dim + 40), normalize(dim)))

# Flat regions carry little local contrast, textured ones a lot.
sd = local_std_map(gray)
print("local std, 10th / 90th percentile: %.1f / %.1f" % tuple(np.percentile(sd, [10, 90])))

# Patches sit on a fixed grid anchored at the top-left corner.
patches = extract_patches(norm, image_id="demo")
print("patches:", len(patches), "expected", patch_count(*gray.shape))
for p in patches:
    print("  origin (%3d, %3d)  patch std %.2f" % (p.origin_row, p.origin_col, p.pixels.std()))

# A large photo gives many more patches.
print("4000x3000 photo ->", patch_count(4000, 3000), "patches")
print("default synthetic image size:", SynthSpec().image_size)
