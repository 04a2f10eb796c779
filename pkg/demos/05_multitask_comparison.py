"""
Does the scene task help?
=========================

In the ``mixed`` synthetic mode every aspect has its own device ordering
and the strength of each degradation depends on the scene's style. We
train with the scene loss switched on (alpha = 1) and off (alpha = 0) on
the same split and print a table of best validation SROCC per aspect.
At this scale the differences are noise-dominated; the point is the harness.
After three epochs the scene head tends to predict the most common training
cluster for every patch, so its validation accuracy can be zero when no
validation scene belongs to that cluster.
"""

import tempfile

from sceneiqa import data, experiments
from sceneiqa.network import NetworkConfig
from sceneiqa.training import TrainConfig

root = tempfile.mkdtemp(prefix="mixed_")
data.generate_synthetic(data.SynthSpec(12, 8, (224, 384), "mixed", seed=1), root, overwrite=True)

rows = experiments.compare_alpha(root, NetworkConfig().reduced(8),
                                 TrainConfig(epochs=3, batch_size=64, seed=0))
print(experiments.format_comparison(rows))
for r in rows:
    acc = ", ".join("%s %.2f" % (a, v) for a, v in r.scene_accuracy.items())
    print("%s scene accuracy: %s" % (r.model, acc))
