"""End-to-end helpers: label scenes, build samples, train and compare runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from . import data, scene
from .imaging import LcnParams
from .network import NetworkConfig
from .training import ASPECTS, LossConfig, TrainConfig, split_by_scene, sub_seed, train


def compute_features(groups: Sequence[data.SceneGroup]) -> list[scene.SceneFeatureVector]:
    feats = []
    for g in groups:
        for device_id, path in g.images:
            feats.append(scene.extract_features(data.read_image_gray(path),
                                                image_id=data.image_id(g.scene_id, device_id)))
    return feats


def label_scenes(groups, k: int = 4, seed: int = 0):
    """Cluster all images into ``k`` scene types; returns ``(model, labels)``."""
    feats = compute_features(groups)
    model = scene.fit_scene_model(feats, k=k, seed=seed)
    labels = [scene.assign_scene(model, f) for f in feats]
    return model, {lab.image_id: lab.scene_id for lab in labels}


def patch_metadata(lcn: LcnParams, patch_size: int, stride: int) -> dict:
    return {
        "lcn": {"half_width_p": lcn.half_width_p, "half_width_q": lcn.half_width_q,
                "stabilizer_c": lcn.stabilizer_c},
        "patch_size": patch_size,
        "stride": stride,
    }


@dataclass
class PreparedData:
    groups: list
    scene_labels: dict
    train_scenes: list
    val_scenes: list


def prepare(root, seed: int = 0, split_fraction: float = 0.8, k: int = 4) -> PreparedData:
    """Load a dataset, cluster its scenes and fix the train/validation split."""
    groups = data.load_dataset(root)
    _, labels = label_scenes(groups, k=k, seed=sub_seed(seed, "clustering"))
    ids = [g.scene_id for g in groups]
    tr, va = split_by_scene(ids, split_fraction, sub_seed(seed, "split"))
    return PreparedData(groups, labels, tr, va)


def samples_for(prep: PreparedData, aspect: str, which: str, lcn=LcnParams(),
                patch_size: int = 64, stride: int = 160):
    keep = set(prep.train_scenes if which == "train" else prep.val_scenes)
    groups = [g for g in prep.groups if g.scene_id in keep]
    return data.build_samples(groups, prep.scene_labels, aspect, lcn, patch_size, stride)


@dataclass
class ComparisonRow:
    model: str
    alpha: float
    srocc: dict
    scene_accuracy: dict
    best_epoch: dict


def compare_alpha(root, net_config: NetworkConfig, train_config: TrainConfig,
                  alphas: Sequence[float] = (1.0, 0.0), aspects: Sequence[str] = ASPECTS,
                  out_dir=None, patch_size: int = 64, stride: int = 160) -> list[ComparisonRow]:
    """Train one model per aspect and alpha on the same split and report the best epochs."""
    prep = prepare(root, seed=train_config.seed, split_fraction=train_config.split_fraction)
    rows = []
    for alpha in alphas:
        name = f"multi-task (alpha={alpha:g})" if alpha > 0 else "single-task (alpha=0)"
        row = ComparisonRow(name, float(alpha), {}, {}, {})
        for aspect in aspects:
            tr = samples_for(prep, aspect, "train", patch_size=patch_size, stride=stride)
            va = samples_for(prep, aspect, "val", patch_size=patch_size, stride=stride)
            run_dir = None if out_dir is None else Path(out_dir) / f"alpha{alpha:g}_{aspect}"
            rep = train(tr, net_config, replace(train_config, aspect=aspect), LossConfig(alpha),
                        out_dir=run_dir, val_samples=va)
            row.srocc[aspect] = rep.best.val_srocc
            row.scene_accuracy[aspect] = rep.best.val_scene_accuracy
            row.best_epoch[aspect] = rep.best_epoch
        rows.append(row)
    return rows


def format_comparison(rows: Sequence[ComparisonRow], aspects: Sequence[str] = ASPECTS) -> str:
    """Markdown table with one row per model and one SROCC column per aspect."""
    def cell(v):
        return "n/a" if v is None or not math.isfinite(v) else f"{v:.4f}"

    head = "| Model | " + " | ".join(a.capitalize() for a in aspects) + " |"
    sep = "|" + "---|" * (len(aspects) + 1)
    lines = [head, sep]
    for r in rows:
        lines.append(f"| {r.model} | " + " | ".join(cell(r.srocc.get(a)) for a in aspects) + " |")
    return "\n".join(lines) + "\n"

