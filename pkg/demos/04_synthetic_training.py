"""
Learning a blur ladder
======================

Twenty synthetic scenes are each "photographed" by fifteen devices whose
blur grows along a ladder, so the true ranking of every scene is known.
A slimmed network is trained for a few epochs and scored by the Spearman
correlation between its image scores and the true ranks, scene by scene.
"""

import logging
import tempfile

from sceneiqa import data, experiments
from sceneiqa.network import NetworkConfig
from sceneiqa.training import LossConfig, TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = tempfile.mkdtemp(prefix="blur_")
data.generate_synthetic(data.SynthSpec(20, 15, (224, 384), "blur", seed=0), root, overwrite=True)
prep = experiments.prepare(root, seed=0)
print("validation scenes:", prep.val_scenes)

train_set = experiments.samples_for(prep, "texture", "train")
val_set = experiments.samples_for(prep, "texture", "val")
print("patches: %d train, %d validation" % (len(train_set), len(val_set)))

report = train(train_set, NetworkConfig().reduced(8), TrainConfig(epochs=3, seed=0),
               LossConfig(alpha=1.0), val_samples=val_set)
for rec in report.epochs:
    print("epoch %d  loss %.3f  val SROCC %.3f  scene accuracy %.2f"
          % (rec.epoch, rec.train_loss, rec.val_srocc, rec.val_scene_accuracy))
print("best epoch:", report.best_epoch)
