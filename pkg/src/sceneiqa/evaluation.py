"""Image-level aggregation, per-scene SROCC and scene-detection accuracy.

Predicted quality is "higher is better" while ground-truth ranks are
"1 is best", so predicted scores are ranked in descending order before
they are compared with the ground ranks.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.stats import rankdata

from .network import NetworkWeights, predict_arrays

log = logging.getLogger(__name__)


class UndefinedCorrelationError(ValueError):
    """A rank vector has zero variance, so the correlation does not exist."""


def aggregate_image_score(patch_predictions) -> float:
    p = np.asarray(patch_predictions, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("cannot aggregate an image with no patch predictions")
    return float(p.mean())


def score_ranks(predicted) -> np.ndarray:
    """Rank scores so the highest gets rank 1; ties share the average rank."""
    return rankdata(-np.asarray(predicted, dtype=np.float64), method="average")


def srocc_from_ranks(ranks_a, ranks_b) -> float:
    a = np.asarray(ranks_a, dtype=np.float64)
    b = np.asarray(ranks_b, dtype=np.float64)
    n = a.size
    if n < 2 or b.size != n:
        raise ValueError("SROCC needs two rank vectors of equal length n >= 2")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("rank vector with zero variance")
    if len(np.unique(a)) == n and len(np.unique(b)) == n:
        d = a - b
        return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1)))
    da, db = a - a.mean(), b - b.mean()
    return float(np.clip(np.dot(da, db) / math.sqrt(np.dot(da, da) * np.dot(db, db)), -1.0, 1.0))


def srocc(predicted, ground_rank) -> float:
    """Spearman correlation between predicted scores and ground-truth ranks.

    Without ties this is ``1 - 6 sum(d^2) / (n (n^2 - 1))``; with ties it is
    the Pearson correlation of the (average) rank vectors. Ground ranks are
    re-ranked, so a 1..n permutation is used as is and gaps left by excluded
    images are closed.
    """
    p = np.asarray(predicted, dtype=np.float64).ravel()
    g = np.asarray(ground_rank, dtype=np.float64).ravel()
    if p.size < 2:
        raise ValueError("SROCC needs at least two items")
    if g.size != p.size:
        raise ValueError(f"{p.size} predictions but {g.size} ground ranks")
    return srocc_from_ranks(score_ranks(p), rankdata(g, method="average"))


# -- model-based evaluation --------------------------------------------------

@dataclass
class ImagePrediction:
    image_id: Hashable
    aspect: str
    predicted_score: float
    patch_count: int
    scene_id: Hashable = None
    rank: int | None = None
    scene_label: int | None = None
    scene_accuracy: float = math.nan
    scene_distribution: np.ndarray | None = field(default=None, repr=False)


@dataclass
class AspectEvaluation:
    aspect: str
    scene_srocc: dict
    mean_srocc: float
    images: list[ImagePrediction]
    warnings: list[str] = field(default_factory=list)

    @property
    def mean_scene_accuracy(self) -> float:
        acc = [im.scene_accuracy for im in self.images if math.isfinite(im.scene_accuracy)]
        return float(np.mean(acc)) if acc else math.nan


def _group_by_image(samples):
    groups = defaultdict(list)
    for s in samples:
        groups[s.image_id].append(s)
    return groups


def predict_images(weights: NetworkWeights, samples: Sequence) -> list[ImagePrediction]:
    """Eval-mode predictions aggregated per source image, in first-seen order."""
    if not samples:
        return []
    x = np.stack([s.patch.pixels for s in samples])
    q, logits = predict_arrays(weights, x)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    hits = np.argmax(logits, axis=1) == np.array([s.scene_label for s in samples])
    by_image = defaultdict(list)
    for i, s in enumerate(samples):
        by_image[s.image_id].append(i)
    out = []
    for image_id, idx in by_image.items():
        first = samples[idx[0]]
        out.append(ImagePrediction(
            image_id=image_id,
            aspect=first.aspect,
            predicted_score=aggregate_image_score(q[idx]),
            patch_count=len(idx),
            scene_id=first.scene_id_of_origin,
            rank=first.rank,
            scene_label=first.scene_label,
            scene_accuracy=float(np.mean(hits[idx])),
            scene_distribution=probs[idx].mean(axis=0),
        ))
    return out


def evaluate_samples(weights: NetworkWeights, samples: Sequence, aspect: str | None = None) -> AspectEvaluation:
    """Per-scene SROCC of image scores against ground ranks, and their mean.

    Scenes with fewer than two images are skipped; scenes whose predictions
    are all tied have no defined SROCC. Both cases are listed in ``warnings``
    and left out of the mean.
    """
    if aspect is not None:
        samples = [s for s in samples if s.aspect == aspect]
    images = predict_images(weights, samples)
    aspect = aspect or (images[0].aspect if images else "")
    by_scene = defaultdict(list)
    for im in images:
        by_scene[im.scene_id].append(im)
    per_scene, warnings = {}, []
    for scene_id in sorted(by_scene, key=str):
        ims = by_scene[scene_id]
        if len(ims) < 2:
            msg = f"scene {scene_id}: {len(ims)} image(s), SROCC skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        try:
            per_scene[scene_id] = srocc([im.predicted_score for im in ims], [im.rank for im in ims])
        except UndefinedCorrelationError:
            msg = f"scene {scene_id}: all predicted scores tied, SROCC undefined"
            log.warning(msg)
            warnings.append(msg)
            per_scene[scene_id] = math.nan
    finite = [v for v in per_scene.values() if math.isfinite(v)]
    mean = float(np.mean(finite)) if finite else math.nan
    return AspectEvaluation(aspect, per_scene, mean, images, warnings)


def evaluate_aspect(weights: NetworkWeights, samples: Sequence, aspect: str):
    """``(per-scene SROCC dict, mean SROCC)`` for one quality aspect."""
    res = evaluate_samples(weights, samples, aspect)
    return res.scene_srocc, res.mean_srocc


def scene_accuracy(weights: NetworkWeights, image_samples: Sequence) -> float:
    """Fraction of one image's patches whose top scene logit matches its label."""
    if not image_samples:
        raise ValueError("scene_accuracy needs at least one patch")
    x = np.stack([s.patch.pixels for s in image_samples])
    _, logits = predict_arrays(weights, x)
    labels = np.array([s.scene_label for s in image_samples])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- reports -------------------------------------------------------------------

def _num(v):
    return None if v is None or not math.isfinite(v) else float(v)


@dataclass
class EvalReport:
    aspects: dict[str, AspectEvaluation]
    metadata: dict = field(default_factory=dict)

    @property
    def mean_srocc(self) -> dict[str, float]:
        return {a: ev.mean_srocc for a, ev in self.aspects.items()}

    def scene_rows(self):
        for a, ev in self.aspects.items():
            for scene_id, v in ev.scene_srocc.items():
                yield {"scene_id": str(scene_id), "aspect": a, "srocc": _num(v)}

    def image_rows(self):
        """One row per image and aspect, with the SROCC of the image's scene."""
        for a, ev in self.aspects.items():
            for im in ev.images:
                yield {
                    "image_id": str(im.image_id),
                    "scene_id": str(im.scene_id),
                    "aspect": a,
                    "scene_label": im.scene_label,
                    "predicted_score": _num(im.predicted_score),
                    "scene_srocc": _num(ev.scene_srocc.get(im.scene_id, math.nan)),
                    "scene_accuracy": _num(im.scene_accuracy),
                    "patch_count": im.patch_count,
                }

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "mean_srocc": {a: _num(v) for a, v in self.mean_srocc.items()},
            "mean_scene_accuracy": {a: _num(ev.mean_scene_accuracy) for a, ev in self.aspects.items()},
            "scenes": list(self.scene_rows()),
            "images": list(self.image_rows()),
            "warnings": [w for ev in self.aspects.values() for w in ev.warnings],
        }

    def write(self, out_prefix) -> list[str]:
        """Write ``<prefix>.json``, ``<prefix>_scenes.csv`` and ``<prefix>_images.csv``."""
        paths = [f"{out_prefix}.json", f"{out_prefix}_scenes.csv", f"{out_prefix}_images.csv"]
        with open(paths[0], "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene_id", "aspect", "srocc"])
            for r in self.scene_rows():
                w.writerow([r["scene_id"], r["aspect"], "" if r["srocc"] is None else f"{r['srocc']:.9g}"])
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "aspect", "scene_accuracy"])
            for r in self.image_rows():
                acc = r["scene_accuracy"]
                w.writerow([r["image_id"], r["aspect"], "" if acc is None else f"{acc:.9g}"])
        return paths


def build_eval_report(weights_by_aspect: dict, samples_by_aspect: dict,
                      metadata: dict | None = None) -> EvalReport:
    aspects = {a: evaluate_samples(weights_by_aspect[a], samples_by_aspect[a], a)
               for a in weights_by_aspect}
    return EvalReport(aspects, dict(metadata or {}))


# -- plotting ------------------------------------------------------------------

def read_train_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_training_curves(records: Sequence[dict], out_path, title: str | None = None) -> str:
    """Per-epoch validation SROCC and scene accuracy, side by side."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise ValueError("no epoch records to plot")
    epochs = [r["epoch"] for r in records]
    nan = float("nan")
    sr = [nan if r.get("val_srocc") is None else r["val_srocc"] for r in records]
    acc = [nan if r.get("val_scene_accuracy") is None else r["val_scene_accuracy"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, sr, marker="o", ms=3)
    axes[0].set_ylabel("validation SROCC")
    axes[1].plot(epochs, acc, marker="o", ms=3, color="tab:orange")
    axes[1].set_ylabel("scene accuracy")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    # fixed metadata keeps the PNG byte-stable across runs
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return os.fspath(out_path)
