"""Losses, label encoding, scene-level splitting and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import evaluation
from .imaging import LcnParams, Patch
from .network import (NetworkConfig, NetworkWeights, backward, forward_arrays,
                      init_weights, save_checkpoint)

log = logging.getLogger(__name__)

ASPECTS = ("texture", "color", "noise", "exposure")
N_RANKS = 15


class LabelError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


def sub_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class Sample:
    patch: Patch
    quality_label: float
    scene_label: int
    scene_id_of_origin: Hashable
    aspect: str
    rank: int

    @property
    def image_id(self):
        return self.patch.source_image_id


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be a finite non-negative number")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    split_fraction: float = 0.8
    seed: int = 0
    aspect: str = "texture"
    # patches per forward/backward call; bounds memory, not the batch size
    chunk_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.chunk_size < 1:
            raise ValueError("learning_rate, batch_size, epochs and chunk_size must be positive")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.aspect not in ASPECTS:
            raise ValueError(f"aspect must be one of {ASPECTS}, got {self.aspect!r}")


# -- losses ------------------------------------------------------------------

def quality_loss(predictions, labels) -> float:
    """Mean absolute error."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyBatchError("quality_loss needs at least one prediction")
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions but {y.size} labels")
    return float(np.mean(np.abs(p - y)))


def _check_scene_labels(labels, n_classes):
    s = np.asarray(labels)
    if s.size and (not np.issubdtype(s.dtype, np.integer) or s.min() < 0 or s.max() >= n_classes):
        raise LabelError(f"scene labels must be integers in 0..{n_classes - 1}")
    return s.astype(np.intp)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def scene_loss(logits, labels) -> float:
    """Mean cross-entropy of softmax(logits) against integer scene labels."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise EmptyBatchError("scene_loss needs a non-empty (N, K) logit matrix")
    s = _check_scene_labels(labels, z.shape[1])
    if s.shape != (len(z),):
        raise ValueError(f"{len(z)} logit rows but {s.size} labels")
    return float(-np.mean(_log_softmax(z)[np.arange(len(z)), s]))


def combined_loss(lq: float, ls: float, config: LossConfig = LossConfig()) -> float:
    return lq + config.alpha * ls


def make_labels(rank: int, n_ranks: int = N_RANKS) -> float:
    """Map rank 1 (best) .. n_ranks (worst) linearly onto 1.0 .. 0.0."""
    if isinstance(rank, bool) or int(rank) != rank or not 1 <= rank <= n_ranks:
        raise LabelError(f"rank must be an integer in 1..{n_ranks}, got {rank!r}")
    if n_ranks < 2:
        raise LabelError("need at least two ranks to form a label scale")
    return (n_ranks - int(rank)) / (n_ranks - 1)


def split_by_scene(scenes: Sequence, fraction: float = 0.8, seed: int = 0):
    """Seeded scene-level partition into round(fraction * n) and the rest."""
    scenes = list(scenes)
    if len(scenes) < 2:
        raise ValueError("need at least two scenes to split")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = min(max(int(round(fraction * len(scenes))), 1), len(scenes) - 1)
    return [scenes[i] for i in order[:n_train]], [scenes[i] for i in order[n_train:]]


# -- gradients ----------------------------------------------------------------

def loss_and_grads(weights: NetworkWeights, x, quality_labels, scene_labels,
                   alpha: float = 1.0, train_mode: bool = False,
                   rng: np.random.Generator | None = None, scale: float | None = None):
    """Total loss ``Lq + alpha * Ls`` on a batch and its gradient.

    ``scale`` overrides the 1/N averaging factor so that chunks of a larger
    batch can be accumulated; the returned losses are always batch means.
    """
    q, logits, cache = forward_arrays(weights, x, train_mode=train_mode, rng=rng)
    dtype = weights.dtype
    y = np.asarray(quality_labels, dtype=dtype)
    s = _check_scene_labels(scene_labels, weights.config.scene_classes)
    n = len(y)
    scale = 1.0 / n if scale is None else scale
    resid = q - y
    lq = float(np.mean(np.abs(resid.astype(np.float64))))
    logp = _log_softmax(logits.astype(np.float64))
    ls = float(-np.mean(logp[np.arange(n), s]))
    d_q = (np.sign(resid) * scale).astype(dtype)
    probs = np.exp(logp)
    probs[np.arange(n), s] -= 1.0
    d_logits = (probs * (alpha * scale)).astype(dtype)
    grads = backward(weights, cache, d_q, d_logits)
    return lq + alpha * ls, lq, ls, grads


class Adam:
    """Adam with bias correction, state kept per parameter name."""

    def __init__(self, params: dict, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p -= (self.lr / c1) * m / denom


# -- training loop -------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_quality_loss: float
    train_scene_loss: float
    val_srocc: float
    val_scene_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint_path: str | None = None
    train_scenes: list = field(default_factory=list)
    val_scenes: list = field(default_factory=list)
    best_weights: NetworkWeights | None = field(default=None, repr=False)
    final_weights: NetworkWeights | None = field(default=None, repr=False)

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_srocc": self.best.val_srocc if self.epochs else None,
            "best_val_scene_accuracy": self.best.val_scene_accuracy if self.epochs else None,
            "best_checkpoint": (os.path.basename(self.best_checkpoint_path)
                                if self.best_checkpoint_path else None),
            "epochs": len(self.epochs),
            "train_scenes": [str(s) for s in self.train_scenes],
            "val_scenes": [str(s) for s in self.val_scenes],
        }


def _json_float(v):
    return None if v is None or not math.isfinite(v) else float(v)


def _epoch_json(rec: EpochRecord) -> dict:
    return {k: (_json_float(v) if isinstance(v, float) else v) for k, v in asdict(rec).items()}


def _stack(samples):
    x = np.stack([s.patch.pixels for s in samples]).astype(np.float32)
    y = np.array([s.quality_label for s in samples], dtype=np.float32)
    sl = np.array([s.scene_label for s in samples], dtype=np.intp)
    return x, y, sl


def train(samples: Sequence[Sample], net_config: NetworkConfig = NetworkConfig(),
          train_config: TrainConfig = TrainConfig(), loss_config: LossConfig = LossConfig(),
          out_dir=None, val_samples: Sequence[Sample] | None = None,
          extra_metadata: dict | None = None) -> TrainReport:
    """Train one model for ``train_config.aspect`` with scene-level validation.

    Without ``val_samples`` the scenes are split ``split_fraction`` / rest.
    After every epoch the model is scored on validation SROCC (mean over
    scenes) and patch-level scene accuracy; the epoch with the highest SROCC
    is kept. With ``out_dir``, ``latest.ckpt``, ``best.ckpt``,
    ``train_report.jsonl`` and ``train_summary.json`` are written there.
    """
    cfg = train_config
    samples = [s for s in samples if s.aspect == cfg.aspect]
    if not samples:
        raise ValueError(f"no training samples for aspect {cfg.aspect!r}")
    if val_samples is None:
        scenes = sorted({s.scene_id_of_origin for s in samples}, key=str)
        train_scenes, val_scenes = split_by_scene(scenes, cfg.split_fraction, sub_seed(cfg.seed, "split"))
        val_set = set(val_scenes)
        train_samples = [s for s in samples if s.scene_id_of_origin not in val_set]
        val_samples = [s for s in samples if s.scene_id_of_origin in val_set]
    else:
        val_samples = [s for s in val_samples if s.aspect == cfg.aspect]
        train_samples = samples
        train_scenes = sorted({s.scene_id_of_origin for s in train_samples}, key=str)
        val_scenes = sorted({s.scene_id_of_origin for s in val_samples}, key=str)
    if not train_samples:
        raise ValueError(f"no training samples for aspect {cfg.aspect!r}")

    x, y, sl = _stack(train_samples)
    weights = init_weights(net_config, sub_seed(cfg.seed, "init"))
    opt = Adam(weights.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))
    dropout_rng = np.random.default_rng(sub_seed(cfg.seed, "dropout"))

    report = TrainReport(train_scenes=list(train_scenes), val_scenes=list(val_scenes))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        jsonl_path = os.path.join(out_dir, "train_report.jsonl")
        open(jsonl_path, "w").close()
    best_score = -math.inf
    meta_base = {
        "seed": cfg.seed,
        "aspect": cfg.aspect,
        "alpha": loss_config.alpha,
        "train_config": asdict(cfg),
        "val_scenes": [str(s) for s in val_scenes],
        **(extra_metadata or {}),
    }

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(x))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            n = len(idx)
            total = None
            batch_losses = np.zeros(3)
            for c0 in range(0, n, cfg.chunk_size):
                cidx = idx[c0:c0 + cfg.chunk_size]
                L, lq, ls, g = loss_and_grads(weights, x[cidx], y[cidx], sl[cidx],
                                              loss_config.alpha, train_mode=True,
                                              rng=dropout_rng, scale=1.0 / n)
                batch_losses += np.array([L, lq, ls]) * (len(cidx) / n)
                if total is None:
                    total = g
                else:
                    for k in total:
                        total[k] += g[k]
            step += 1
            if not np.all(np.isfinite(batch_losses)):
                state = {
                    "epoch": epoch, "step": step, "losses": [_json_float(v) for v in batch_losses],
                    "param_norms": {k: _json_float(float(np.linalg.norm(v))) for k, v in weights.params.items()},
                }
                if out_dir is not None:
                    with open(os.path.join(out_dir, "divergence_dump.json"), "w") as fh:
                        json.dump(state, fh, indent=2, sort_keys=True)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}", state)
            opt.step(weights.params, total)
            sums += batch_losses * n

        val = evaluation.evaluate_samples(weights, val_samples) if val_samples else None
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(sums[0] / len(x)),
            train_quality_loss=float(sums[1] / len(x)),
            train_scene_loss=float(sums[2] / len(x)),
            val_srocc=val.mean_srocc if val else math.nan,
            val_scene_accuracy=val.mean_scene_accuracy if val else math.nan,
        )
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f (Lq %.4f Ls %.4f) val SROCC %.4f scene acc %.4f",
                 epoch, rec.train_loss, rec.train_quality_loss, rec.train_scene_loss,
                 rec.val_srocc, rec.val_scene_accuracy)
        score = rec.val_srocc if math.isfinite(rec.val_srocc) else -math.inf
        improved = score > best_score or report.best_weights is None
        if improved:
            best_score = score
            report.best_epoch = epoch
            report.best_weights = weights.copy()
        if out_dir is not None:
            meta = dict(meta_base, epoch=epoch, history=[_epoch_json(r) for r in report.epochs])
            save_checkpoint(os.path.join(out_dir, "latest.ckpt"), weights, meta)
            if improved:
                report.best_checkpoint_path = os.path.join(out_dir, "best.ckpt")
                save_checkpoint(report.best_checkpoint_path, weights, meta)
            with open(jsonl_path, "a") as fh:
                fh.write(json.dumps(_epoch_json(rec), sort_keys=True) + "\n")

    report.final_weights = weights
    if out_dir is not None:
        with open(os.path.join(out_dir, "train_summary.json"), "w") as fh:
            json.dump(report.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
