"""
Scene types from block statistics and edges
===========================================

Each image is summarized by 37 numbers: how the brightness of its 64
sub-blocks is distributed, how their contrast is distributed, and which
kinds of 2x2 edges dominate. K-means over these descriptors sorts a
collection into four scene types, used as a side task during training.
"""

import tempfile
from collections import Counter

from sceneiqa import data, experiments
from sceneiqa.scene import EDGE_NAMES, extract_features

root = tempfile.mkdtemp(prefix="scenes_")
# scenes cycle through four base styles: night, textured, balanced, low contrast
data.generate_synthetic(data.SynthSpec(n_scenes=8, n_devices=3, image_size=(128, 192), seed=1), root,
                        overwrite=True)
groups = data.load_dataset(root)

first = groups[0]
f = extract_features(data.read_image_gray(first.images[0][1]))
print("descriptor length:", f.as_array().size)
print("brightest occupied mean bin:", max(i for i, v in enumerate(f.mean_hist) if v > 0))
print("edge ratios:", {n: round(float(v), 3) for n, v in zip(EDGE_NAMES, f.edge_ratios)})

model, labels = experiments.label_scenes(groups, k=4, seed=0)
print("objective per iteration:", [round(v, 1) for v in model.objective_history])

styles = data.STYLES
table = Counter()
for i, g in enumerate(groups):
    for iid in g.image_ids():
        table[(styles[i % len(styles)], labels[iid])] += 1
print("style vs cluster:")
for (style, cluster), n in sorted(table.items()):
    print("  %-13s -> scene type %d  (%d images)" % (style, cluster, n))
