"""Command line entry point: ``sceneiqa <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data, evaluation, scene
from .experiments import patch_metadata
from .imaging import ImageDimensionError, LcnParams, extract_patches, normalize
from .network import CheckpointError, NetworkConfig, load_checkpoint, predict_arrays
from .training import (ASPECTS, LabelError, LossConfig, TrainConfig, TrainingDivergedError,
                       split_by_scene, sub_seed, train)

log = logging.getLogger("sceneiqa")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DATA_ROOT_ENV = "IQA_DATA_ROOT"


class UsageError(Exception):
    pass


_VALIDATION_ERRORS = (UsageError, data.DatasetError, scene.DegenerateClusteringError,
                      CheckpointError, LabelError, ImageDimensionError, FileExistsError)

# config-file key -> (type, default)
TRAIN_KEYS = {
    "learning_rate": (float, 0.001),
    "batch_size": (int, 128),
    "epochs": (int, 50),
    "alpha": (float, 1.0),
    "seed": (int, 0),
    "aspect": (str, "texture"),
    "split_fraction": (float, 0.8),
    "channel_divisor": (int, 1),
    "chunk_size": (int, 64),
    "patch_size": (int, 64),
    "stride": (int, 160),
    "lcn_p": (int, 3),
    "lcn_q": (int, 3),
    "lcn_c": (float, 1.0),
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[run]\n" + fh.read())
    out = {}
    for key, raw in parser["run"].items():
        if key not in TRAIN_KEYS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        typ = TRAIN_KEYS[key][0]
        try:
            out[key] = typ(raw)
        except ValueError:
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from None
    return out


def effective_settings(args) -> dict:
    """CLI flag > config file > default."""
    settings = {k: d for k, (_, d) in TRAIN_KEYS.items()}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    return settings


def _echo(title, settings: dict):
    for k in sorted(settings):
        log.info("%s %s = %s", title, k, settings[k])


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no data root given (use --data-root or set {DATA_ROOT_ENV})")
    return Path(root)


def _lcn(settings) -> LcnParams:
    return LcnParams(settings["lcn_p"], settings["lcn_q"], settings["lcn_c"])


def _net_config(settings) -> NetworkConfig:
    base = NetworkConfig(input_size=settings["patch_size"])
    return base if settings["channel_divisor"] == 1 else base.reduced(settings["channel_divisor"])


# -- subcommands ---------------------------------------------------------------

def _list_images(image_dir: Path):
    return sorted(p for p in image_dir.rglob("*")
                  if p.is_file() and p.suffix.lower() in data.IMAGE_SUFFIXES)


def cmd_features(args) -> int:
    image_dir = Path(args.image_dir)
    if not image_dir.is_dir():
        raise UsageError(f"{image_dir}: not a directory")
    paths = _list_images(image_dir)
    if not paths:
        print(f"error: no images found in {image_dir}", file=sys.stderr)
        return EXIT_USAGE

    def one(p):
        iid = p.relative_to(image_dir).with_suffix("").as_posix()
        return scene.extract_features(data.read_image_gray(p), image_id=iid)

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        feats = list(pool.map(one, paths))
    scene.write_features_csv(args.out_csv, feats)
    log.info("wrote %d feature rows to %s", len(feats), args.out_csv)
    return EXIT_OK


def cmd_cluster(args) -> int:
    feats = scene.read_features_csv(args.features_csv)
    seed = sub_seed(args.seed, "clustering")
    _echo("cluster", {"k": args.k, "seed": args.seed, "clustering_seed": seed})
    model = scene.fit_scene_model(feats, k=args.k, seed=seed)
    Path(args.out).write_text(model.to_json(), encoding="utf-8")
    labels_path = args.labels or str(Path(args.out).with_name(data.LABELS_FILE))
    scene.write_scene_labels(labels_path, [scene.assign_scene(model, f) for f in feats])
    log.info("wrote %s and %s", args.out, labels_path)
    return EXIT_OK


def cmd_synth(args) -> int:
    ladder = tuple(float(v) for v in args.ladder.split(",")) if args.ladder else None
    spec = data.SynthSpec(args.scenes, args.devices, (args.height, args.width),
                          args.degradation, ladder, args.seed)
    _echo("synth", asdict(spec))
    data.generate_synthetic(spec, args.out, overwrite=args.overwrite)
    return EXIT_OK


def _samples(groups, labels, aspect, settings, workers):
    lcn = _lcn(settings)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda g: data.build_samples([g], labels, aspect, lcn,
                                                      settings["patch_size"], settings["stride"]), groups)
        return [s for part in parts for s in part]


def cmd_train(args) -> int:
    settings = effective_settings(args)
    root = _data_root(args)
    settings["data_root"] = str(root)
    if settings["aspect"] not in ASPECTS:
        raise UsageError(f"aspect must be one of {ASPECTS}")
    named = {n: sub_seed(settings["seed"], n) for n in ("split", "init", "shuffle", "dropout")}
    _echo("train", {**settings, **{f"seed.{k}": v for k, v in named.items()}})

    groups = data.load_dataset(root)
    labels = (scene.read_scene_labels(args.scene_labels) if args.scene_labels
              else data.load_scene_labels(root))
    tr_ids, va_ids = split_by_scene([g.scene_id for g in groups], settings["split_fraction"], named["split"])
    aspect = settings["aspect"]
    tr = _samples([g for g in groups if g.scene_id in set(tr_ids)], labels, aspect, settings, args.workers)
    va = _samples([g for g in groups if g.scene_id in set(va_ids)], labels, aspect, settings, args.workers)

    tcfg = TrainConfig(
        learning_rate=settings["learning_rate"], batch_size=settings["batch_size"],
        epochs=settings["epochs"], split_fraction=settings["split_fraction"], seed=settings["seed"],
        aspect=aspect, chunk_size=settings["chunk_size"])
    meta = patch_metadata(_lcn(settings), settings["patch_size"], settings["stride"])
    meta.update(split_seed=named["split"], train_scenes=[str(s) for s in tr_ids])
    report = train(tr, _net_config(settings), tcfg, LossConfig(settings["alpha"]),
                   out_dir=args.out, val_samples=va, extra_metadata=meta)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def _checkpoint(args):
    expected = None
    if getattr(args, "channel_divisor", None):
        expected = _net_config({**{k: d for k, (_, d) in TRAIN_KEYS.items()},
                                "channel_divisor": args.channel_divisor})
    return load_checkpoint(args.checkpoint, expected_config=expected)


def _ckpt_lcn(meta) -> LcnParams:
    lcn = meta.get("lcn", {})
    return LcnParams(lcn.get("half_width_p", 3), lcn.get("half_width_q", 3), lcn.get("stabilizer_c", 1.0))


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args)
    meta = ckpt.metadata
    aspect = args.aspect or meta.get("aspect")
    if meta.get("aspect") and aspect != meta["aspect"]:
        raise CheckpointError(
            f"checkpoint was trained for aspect {meta['aspect']!r}, not {aspect!r}")
    root = _data_root(args)
    groups = data.load_dataset(root)
    labels = data.load_scene_labels(root)
    if not args.all_scenes and meta.get("val_scenes"):
        keep = set(meta["val_scenes"])
        groups = [g for g in groups if g.scene_id in keep]
    samples = data.build_samples(groups, labels, aspect, _ckpt_lcn(meta),
                                 meta.get("patch_size", 64), meta.get("stride", 160))
    ev = evaluation.evaluate_samples(ckpt.weights, samples, aspect)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    report = evaluation.EvalReport({aspect: ev}, {
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_sha256": digest,
        "split_seed": meta.get("split_seed"),
        "epoch": meta.get("epoch"),
        "scenes": "all" if args.all_scenes else "validation",
    })
    paths = report.write(args.out)
    print(json.dumps({"aspect": aspect, "mean_srocc": ev.mean_srocc,
                      "scenes": len(ev.scene_srocc), "outputs": paths}))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _checkpoint(args)
    meta = ckpt.metadata
    size = ckpt.weights.config.input_size
    gray = data.read_image_gray(args.image)
    patches = extract_patches(normalize(gray, _ckpt_lcn(meta)), meta.get("patch_size", size),
                              meta.get("stride", 160), image_id=str(args.image))
    q, logits = predict_arrays(ckpt.weights, np.stack([p.pixels for p in patches]))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    result = {
        "image": str(args.image),
        "aspect": meta.get("aspect"),
        "quality": evaluation.aggregate_image_score(q),
        "patches": len(patches),
        "scene_distribution": [float(v) for v in probs.mean(axis=0)],
    }
    print(json.dumps(result))
    return EXIT_OK


def cmd_plot(args) -> int:
    records = evaluation.read_train_report(args.report)
    if not records:
        raise UsageError(f"{args.report}: no epoch records")
    evaluation.plot_training_curves(records, args.out, title=args.title)
    log.info("wrote %s", args.out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sceneiqa", description="Multi-task CNN photo quality toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("features", help="compute 37-dim scene descriptors for a directory of images")
    f.add_argument("image_dir")
    f.add_argument("out_csv")
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_features)

    c = sub.add_parser("cluster", help="K-means scene clustering of a feature CSV")
    c.add_argument("features_csv")
    c.add_argument("--out", required=True, help="scene model JSON")
    c.add_argument("--labels", help="scene labels JSON (default: scene_labels.json next to --out)")
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cluster)

    s = sub.add_parser("synth", help="generate a synthetic dataset with known quality order")
    s.add_argument("out")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--devices", type=int, default=15)
    s.add_argument("--height", type=int, default=224)
    s.add_argument("--width", type=int, default=384)
    s.add_argument("--degradation", choices=data.DEGRADATIONS, default="blur")
    s.add_argument("--ladder", help="comma-separated strictly increasing strengths, one per device")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model for one quality aspect")
    t.add_argument("--data-root")
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--out", required=True, help="run directory for checkpoints and reports")
    t.add_argument("--scene-labels", help="default: <data-root>/scene_labels.json")
    t.add_argument("--aspect", choices=ASPECTS)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--batch", dest="batch_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split", dest="split_fraction", type=float)
    t.add_argument("--channel-divisor", dest="channel_divisor", type=int,
                   help="divide every layer width (1 = full network)")
    t.add_argument("--chunk", dest="chunk_size", type=int)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--stride", type=int)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-scene SROCC and scene accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root")
    e.add_argument("--aspect", choices=ASPECTS)
    e.add_argument("--out", required=True, help="output prefix for .json and .csv reports")
    e.add_argument("--all-scenes", action="store_true", help="evaluate every scene, not only validation")
    e.add_argument("--channel-divisor", dest="channel_divisor", type=int)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="quality score and scene distribution of one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("image")
    pr.add_argument("--channel-divisor", dest="channel_divisor", type=int)
    pr.set_defaults(func=cmd_predict)

    pl = sub.add_parser("plot", help="plot per-epoch validation curves from train_report.jsonl")
    pl.add_argument("report")
    pl.add_argument("--out", required=True)
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
