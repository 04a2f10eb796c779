"""Scene descriptors and K-means scene clustering.

Each image is summarized by a 37-dimension vector: a 16-bin histogram of
the 64 sub-block means, a 16-bin histogram of the 64 sub-block standard
deviations, and five edge-type ratios from 2x2 edge filters. K-means over
the standardized descriptors gives the scene label for the auxiliary task.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .imaging import ImageDimensionError, as_gray

GRID = 8
N_BINS = 16
FEATURE_DIM = 2 * N_BINS + 5
MEAN_RANGE = (0.0, 256.0)
STD_RANGE = (0.0, 128.0)
EDGE_THRESHOLD = 11.0

_R2 = math.sqrt(2.0)
EDGE_FILTERS = np.array([
    [[1.0, -1.0], [1.0, -1.0]],    # vertical
    [[1.0, 1.0], [-1.0, -1.0]],    # horizontal
    [[_R2, 0.0], [0.0, -_R2]],     # 45 degree diagonal
    [[0.0, _R2], [-_R2, 0.0]],     # 135 degree diagonal
    [[2.0, -2.0], [-2.0, 2.0]],    # non-directional
])
EDGE_NAMES = ("vertical", "horizontal", "diag45", "diag135", "nondirectional")


class DegenerateClusteringError(ValueError):
    pass


@dataclass
class SceneFeatureVector:
    mean_hist: np.ndarray
    std_hist: np.ndarray
    edge_ratios: np.ndarray
    image_id: Hashable = None

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.mean_hist, self.std_hist, self.edge_ratios])

    @classmethod
    def from_array(cls, values, image_id=None) -> "SceneFeatureVector":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (FEATURE_DIM,):
            raise ValueError(f"expected {FEATURE_DIM} values, got shape {v.shape}")
        return cls(v[:N_BINS].copy(), v[N_BINS:2 * N_BINS].copy(), v[2 * N_BINS:].copy(), image_id)


def block_bounds(length: int, parts: int = GRID) -> list[int]:
    return [(k * length) // parts for k in range(parts + 1)]


def subblock_grid(img) -> list[list[np.ndarray]]:
    """Split an image into an 8x8 grid of views with floor-rounded borders."""
    arr = as_gray(img)
    h, w = arr.shape
    if h < GRID or w < GRID:
        raise ImageDimensionError(f"image of size {h}x{w} is smaller than {GRID}x{GRID}")
    rb, cb = block_bounds(h), block_bounds(w)
    return [[arr[rb[r]:rb[r + 1], cb[c]:cb[c + 1]] for c in range(GRID)] for r in range(GRID)]


def block_statistics(blocks) -> tuple[np.ndarray, np.ndarray]:
    """Per-block mean and population standard deviation, row-major (64 each)."""
    flat = [b for row in blocks for b in row]
    means = np.array([b.mean() for b in flat])
    stds = np.array([b.std() for b in flat])
    return means, stds


def histogram16(values, range_min: float, range_max: float) -> np.ndarray:
    """Normalized 16-bin equal-width histogram; out-of-range values are clamped.

    A value equal to ``range_max`` lands in the last bin.
    """
    if not range_max > range_min:
        raise ValueError("range_max must exceed range_min")
    v = np.asarray(values, dtype=np.float64).ravel()
    width = (range_max - range_min) / N_BINS
    idx = np.floor((np.clip(v, range_min, range_max) - range_min) / width).astype(int)
    idx = np.clip(idx, 0, N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS) / v.size


def _cells(block: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 cells of a block as rows of 4; odd edges dropped."""
    h2, w2 = block.shape[0] - block.shape[0] % 2, block.shape[1] - block.shape[1] % 2
    return block[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 1, 3).reshape(-1, 4)


def edge_ratios(img, filters=EDGE_FILTERS, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Fraction of 2x2 cells of each edge type, averaged over the 64 sub-blocks.

    A cell takes the filter with the largest absolute response (lowest index on
    ties) when that magnitude exceeds ``threshold``; otherwise it has no edge.
    """
    bank = np.asarray(filters, dtype=np.float64).reshape(-1, 4)
    ratios = np.zeros(len(bank))
    for row in subblock_grid(img):
        for b in row:
            cells = _cells(b)
            if len(cells) == 0:
                continue
            mag = np.abs(cells @ bank.T)
            best = np.argmax(mag, axis=1)
            is_edge = mag[np.arange(len(mag)), best] > threshold
            ratios += np.bincount(best[is_edge], minlength=len(bank)) / len(cells)
    return ratios / (GRID * GRID)


def extract_features(img, image_id: Hashable = None,
                     threshold: float = EDGE_THRESHOLD) -> SceneFeatureVector:
    """Compute the 37-dimension descriptor of a raw (not normalized) gray image."""
    arr = as_gray(img)
    if arr.shape[0] < 2 * GRID or arr.shape[1] < 2 * GRID:
        raise ImageDimensionError(
            f"scene features need at least {2 * GRID}x{2 * GRID} pixels, got {arr.shape}")
    means, stds = block_statistics(subblock_grid(arr))
    return SceneFeatureVector(
        mean_hist=histogram16(means, *MEAN_RANGE),
        std_hist=histogram16(stds, *STD_RANGE),
        edge_ratios=edge_ratios(arr, threshold=threshold),
        image_id=image_id,
    )


# -- clustering ---------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise DegenerateClusteringError(f"fewer than {k} distinct points")
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(closest), u, side="right"))
        idx = min(idx, n - 1)
        # guard against landing on a zero-weight point through rounding
        while closest[idx] == 0:
            idx = (idx + 1) % n
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def kmeans(x, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``objective_history[t]`` is the within-cluster sum of squares after the
    t-th assignment step (entry 0 uses the initial centroids). An emptied
    cluster keeps its previous centroid, which preserves monotonicity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D data matrix")
    if len(x) < k or len(np.unique(x, axis=0)) < k:
        raise DegenerateClusteringError(
            f"need at least {k} distinct points to form {k} clusters, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    d = _sq_dists(x, centroids)
    labels = np.argmin(d, axis=1)
    history = [float(d[np.arange(len(x)), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = centroids.copy()
        for c in range(k):
            members = x[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        if shift < tol:
            break
    return KMeansResult(centroids, labels, history, n_iter)


@dataclass
class SceneModel:
    """Four centroids in standardized feature space plus the scaling used."""

    centroids: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    seed: int
    threshold: float = EDGE_THRESHOLD
    objective_history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def standardize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.feature_mean) / self.feature_std

    def raw_centroids(self) -> np.ndarray:
        return self.centroids * self.feature_std + self.feature_mean

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "seed": self.seed,
            "threshold": self.threshold,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "centroids": self.centroids.tolist(),
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SceneModel":
        d = json.loads(text)
        return cls(
            centroids=np.array(d["centroids"], dtype=np.float64),
            feature_mean=np.array(d["feature_mean"], dtype=np.float64),
            feature_std=np.array(d["feature_std"], dtype=np.float64),
            seed=int(d["seed"]),
            threshold=float(d.get("threshold", EDGE_THRESHOLD)),
        )


@dataclass(frozen=True)
class SceneLabel:
    image_id: Hashable
    scene_id: int


def _as_matrix(features) -> np.ndarray:
    rows = [f.as_array() if isinstance(f, SceneFeatureVector) else np.asarray(f, dtype=np.float64)
            for f in features]
    return np.vstack(rows) if rows else np.empty((0, FEATURE_DIM))


def fit_scene_model(features: Sequence, k: int = 4, seed: int = 0,
                    max_iter: int = 300, tol: float = 1e-6,
                    threshold: float = EDGE_THRESHOLD) -> SceneModel:
    """Standardize the corpus and cluster it into ``k`` scene types.

    Cluster ids are renumbered by ascending centroid norm so that the
    numbering does not depend on the initialization order.
    """
    x = _as_matrix(features)
    if len(x) < k:
        raise DegenerateClusteringError(f"need at least {k} feature vectors, got {len(x)}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    res = kmeans(z, k, seed, max_iter=max_iter, tol=tol)
    norms = np.linalg.norm(res.centroids, axis=1)
    order = np.lexsort(tuple(res.centroids.T[::-1]) + (norms,))
    return SceneModel(res.centroids[order], mean, std, seed, threshold, res.objective_history)


def nearest_centroid(centroids: np.ndarray, z) -> int:
    d = ((np.asarray(centroids) - np.asarray(z)) ** 2).sum(axis=1)
    return int(np.argmin(d))


def assign_scene(model: SceneModel, feature) -> SceneLabel:
    """Nearest centroid in standardized space; ties go to the lowest id."""
    if isinstance(feature, SceneFeatureVector):
        values, image_id = feature.as_array(), feature.image_id
    else:
        values, image_id = feature, None
    return SceneLabel(image_id, nearest_centroid(model.centroids, model.standardize(values)))


# -- persistence ---------------------------------------------------------------

def write_features_csv(path, features: Sequence[SceneFeatureVector]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id"] + [f"f{i}" for i in range(FEATURE_DIM)])
        for f in features:
            w.writerow([f.image_id] + [f"{v:.9g}" for v in f.as_array()])


def read_features_csv(path) -> list[SceneFeatureVector]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["image_id"] or len(rows[0]) != FEATURE_DIM + 1:
        raise ValueError(f"{path}: expected header image_id,f0..f{FEATURE_DIM - 1}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != FEATURE_DIM + 1:
            raise ValueError(f"{path}:{lineno}: expected {FEATURE_DIM + 1} columns, got {len(row)}")
        out.append(SceneFeatureVector.from_array([float(v) for v in row[1:]], image_id=row[0]))
    return out


def write_scene_labels(path, labels: Sequence[SceneLabel]) -> None:
    payload = {str(lab.image_id): int(lab.scene_id) for lab in labels}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scene_labels(path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return {str(k): int(v) for k, v in d.items()}
