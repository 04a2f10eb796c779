"""Dataset ingestion and synthetic dataset generation.

On-disk layout::

    <root>/scenes/<scene_id>/<device_id>.png
    <root>/ranks.csv          # scene_id,device_id,texture,color,noise,exposure
    <root>/scene_labels.json  # optional, image_id -> scene id

Image ids are ``"<scene_id>/<device_id>"`` throughout the package.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .imaging import LcnParams, extract_patches, normalize, to_grayscale
from .training import ASPECTS, Sample, make_labels

log = logging.getLogger(__name__)

RANKS_FILE = "ranks.csv"
LABELS_FILE = "scene_labels.json"
RANKS_HEADER = ["scene_id", "device_id", *ASPECTS]
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


def image_id(scene_id, device_id) -> str:
    return f"{scene_id}/{device_id}"


@dataclass
class SceneGroup:
    scene_id: str
    images: list[tuple[str, Path]]
    ranks: dict[str, dict[str, int]]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_devices(self) -> int:
        return len(next(iter(self.ranks.values())))

    def image_ids(self) -> list[str]:
        return [image_id(self.scene_id, d) for d, _ in self.images]


def read_image_rgb(path) -> np.ndarray:
    """8-bit image as a float64 ``(H, W, 3)`` array; gray files are replicated."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64)


def read_image_gray(path) -> np.ndarray:
    return to_grayscale(read_image_rgb(path))


def _find_image(scene_dir: Path, device_id: str):
    for suffix in IMAGE_SUFFIXES:
        p = scene_dir / f"{device_id}{suffix}"
        if p.exists():
            return p
    return None


def _readable(path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def load_dataset(root) -> list[SceneGroup]:
    """Load and validate every scene listed in ``ranks.csv``.

    Ranks must be a permutation of 1..N within each scene and aspect, else a
    ``DatasetError`` names the scene. Missing or unreadable images are
    excluded with a warning recorded on their scene.
    """
    root = Path(root)
    ranks_path = root / RANKS_FILE
    if not ranks_path.is_file():
        raise DatasetError(f"{ranks_path}: ranks file not found")
    with open(ranks_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RANKS_HEADER:
            raise DatasetError(f"{ranks_path}: expected header {','.join(RANKS_HEADER)}, got {header}")
        rows = list(reader)

    tables: dict[str, dict[str, dict[str, int]]] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(RANKS_HEADER):
            raise DatasetError(f"{ranks_path}:{lineno}: expected {len(RANKS_HEADER)} fields")
        scene_id, device_id = row[0], row[1]
        try:
            values = [int(v) for v in row[2:]]
        except ValueError:
            raise DatasetError(f"{ranks_path}:{lineno}: scene {scene_id}: non-integer rank") from None
        per_aspect = tables.setdefault(scene_id, {a: {} for a in ASPECTS})
        if device_id in per_aspect[ASPECTS[0]]:
            raise DatasetError(f"scene {scene_id}: duplicate device {device_id}")
        for a, v in zip(ASPECTS, values):
            per_aspect[a][device_id] = v

    groups = []
    for scene_id in sorted(tables):
        ranks = tables[scene_id]
        n = len(ranks[ASPECTS[0]])
        for a in ASPECTS:
            if sorted(ranks[a].values()) != list(range(1, n + 1)):
                raise DatasetError(
                    f"scene {scene_id}: {a} ranks {sorted(ranks[a].values())} are not a permutation of 1..{n}")
        scene_dir = root / "scenes" / scene_id
        images, warnings = [], []
        for device_id in sorted(ranks[ASPECTS[0]]):
            path = _find_image(scene_dir, device_id)
            if path is None:
                warnings.append(f"scene {scene_id}: image for device {device_id} is missing")
            elif not _readable(path):
                warnings.append(f"scene {scene_id}: image {path.name} is unreadable")
            else:
                images.append((device_id, path))
        if scene_dir.is_dir():
            listed = set(ranks[ASPECTS[0]])
            for p in sorted(scene_dir.iterdir()):
                if p.suffix.lower() in IMAGE_SUFFIXES and p.stem not in listed:
                    warnings.append(f"scene {scene_id}: image {p.name} has no ranks and is ignored")
        for w in warnings:
            log.warning(w)
        groups.append(SceneGroup(scene_id, images, ranks, warnings))
    return groups


def load_scene_labels(root) -> dict[str, int]:
    path = Path(root) / LABELS_FILE
    if not path.is_file():
        raise DatasetError(f"{path}: scene labels not found; run clustering first")
    with open(path, encoding="utf-8") as fh:
        return {str(k): int(v) for k, v in json.load(fh).items()}


def build_samples(groups: Sequence[SceneGroup], scene_labels: dict, aspect: str,
                  lcn_params: LcnParams = LcnParams(), patch_size: int = 64,
                  stride: int = 160) -> list[Sample]:
    """Grayscale, normalize and crop every image, labelling each patch.

    Every patch inherits its image's quality label (from the rank) and its
    image's scene label.
    """
    if aspect not in ASPECTS:
        raise ValueError(f"unknown aspect {aspect!r}")
    out = []
    for g in groups:
        n_ranks = g.n_devices
        for device_id, path in g.images:
            iid = image_id(g.scene_id, device_id)
            if iid not in scene_labels:
                raise DatasetError(f"image {iid} has no scene label")
            if device_id not in g.ranks[aspect]:
                raise DatasetError(f"image {iid} has no {aspect} rank")
            rank = g.ranks[aspect][device_id]
            label = make_labels(rank, n_ranks)
            norm = normalize(read_image_gray(path), lcn_params)
            for patch in extract_patches(norm, patch_size, stride, image_id=iid):
                out.append(Sample(patch, label, int(scene_labels[iid]), g.scene_id, aspect, rank))
    return out


# -- synthetic data -----------------------------------------------------------

DEGRADATIONS = ("blur", "noise", "exposure", "mixed")
STYLES = ("night", "textured", "balanced", "low_contrast")

# physical strength per unit ladder value in mixed mode, per aspect
MIXED_SCALE = {"texture": 1.0, "color": 0.25, "noise": 6.0, "exposure": 0.3}
# mixed-mode strength multiplier per base style (scene-correlated degradations)
STYLE_SEVERITY = {
    "night": {"texture": 0.6, "color": 1.0, "noise": 1.8, "exposure": 0.6},
    "textured": {"texture": 1.4, "color": 1.0, "noise": 0.8, "exposure": 1.0},
    "balanced": {"texture": 1.0, "color": 1.2, "noise": 1.0, "exposure": 1.0},
    "low_contrast": {"texture": 0.8, "color": 0.8, "noise": 1.2, "exposure": 1.6},
}


@dataclass(frozen=True)
class SynthSpec:
    n_scenes: int = 20
    n_devices: int = 15
    image_size: tuple = (224, 384)
    degradation: str = "blur"
    ladder: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.ladder is None:
            object.__setattr__(self, "ladder", tuple(default_ladder(self.degradation, self.n_devices)))
        else:
            object.__setattr__(self, "ladder", tuple(float(v) for v in self.ladder))
        if self.n_scenes < 1 or self.n_devices < 1:
            raise ValueError("n_scenes and n_devices must be positive")
        if self.degradation not in DEGRADATIONS:
            raise ValueError(f"degradation must be one of {DEGRADATIONS}")
        if len(self.ladder) != self.n_devices:
            raise ValueError(f"ladder has {len(self.ladder)} entries for {self.n_devices} devices")
        lad = np.array(self.ladder)
        if np.any(lad <= 0) or np.any(np.diff(lad) <= 0):
            raise ValueError("ladder must be strictly increasing and positive")
        if min(self.image_size) < 16:
            raise ValueError("images must be at least 16x16")


def default_ladder(degradation: str, n: int) -> np.ndarray:
    lo, hi = {"blur": (0.5, 3.5), "noise": (2.0, 30.0), "exposure": (0.05, 0.8)}.get(degradation, (0.3, 3.0))
    return np.linspace(lo, hi, n)


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def render_base_image(rng: np.random.Generator, shape, style: str) -> np.ndarray:
    """Procedural RGB scene in [0, 255]: gradient, texture field and shapes."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * xx + np.sin(angle) * yy
    grad = (grad - grad.min()) / (np.ptp(grad) + 1e-12)
    fine = _smooth_noise(rng, shape, rng.uniform(0.8, 1.6))
    coarse = _smooth_noise(rng, shape, rng.uniform(4, 10))
    base, contrast, tex = {
        "night": (25.0, 30.0, 6.0),
        "textured": (120.0, 60.0, 38.0),
        "balanced": (130.0, 70.0, 18.0),
        "low_contrast": (70.0, 20.0, 8.0),
    }[style]
    g = base + contrast * (grad - 0.5) + 0.4 * contrast * coarse
    if style == "balanced":
        # smooth half and textured half
        split = rng.uniform(0.3, 0.7) * w
        g = g + tex * fine * (np.arange(w)[None, :] > split) * 1.5
    else:
        g = g + tex * fine
    n_shapes = int(rng.integers(3, 8))
    for _ in range(n_shapes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.04, 0.18) * min(h, w)
        level = 235.0 if style == "night" else rng.uniform(base - contrast, base + contrast)
        if rng.random() < 0.5:
            mask = (yy * max(h, w) - cy) ** 2 + (xx * max(h, w) - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy * max(h, w) - cy) < r) & (np.abs(xx * max(h, w) - cx) < 1.5 * r)
        g = np.where(mask, level + 0.5 * tex * fine, g)
    tint = rng.uniform(-25, 25, size=3)
    chroma = _smooth_noise(rng, shape, 20)[..., None] * rng.uniform(8, 20, size=3)
    rgb = g[..., None] + tint + chroma
    return np.clip(rgb, 0, 255)


def _luma(rgb):
    return to_grayscale(np.clip(rgb, 0, 255))


def apply_blur(rgb, sigma):
    return ndimage.gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="reflect")


def apply_noise(rgb, std, rng):
    return rgb + rng.normal(0.0, std, size=rgb.shape)


def apply_exposure(rgb, amount):
    """Brightening gamma curve; larger ``amount`` means stronger over-exposure."""
    return 255.0 * (np.clip(rgb, 0, 255) / 255.0) ** (1.0 / (1.0 + amount))


def apply_desaturation(rgb, amount):
    """Pull chroma toward luma; ``amount`` 0 keeps color, 1 removes it."""
    y = _luma(rgb)[..., None]
    return y + (1.0 - min(amount, 1.0)) * (rgb - y)


def _to_uint8(rgb):
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def scene_name(i: int) -> str:
    return f"s{i:03d}"


def device_name(i: int) -> str:
    return f"d{i:02d}"


def degrade(rgb, spec: SynthSpec, device: int, aspect_levels: dict | None, rng) -> np.ndarray:
    if spec.degradation == "blur":
        return apply_blur(rgb, spec.ladder[device])
    if spec.degradation == "noise":
        return apply_noise(rgb, spec.ladder[device], rng)
    if spec.degradation == "exposure":
        return apply_exposure(rgb, spec.ladder[device])
    lv = aspect_levels
    out = apply_desaturation(rgb, lv["color"])
    out = apply_blur(out, lv["texture"])
    out = apply_exposure(out, lv["exposure"])
    return apply_noise(out, lv["noise"], rng)


def generate_synthetic(spec: SynthSpec, out, overwrite: bool = False) -> Path:
    """Render a seeded dataset in the standard layout.

    Single-axis modes give every aspect the ladder order as its ranks. In
    ``mixed`` mode each aspect has its own seeded device ordering and the
    degradation strength also depends on the scene's base style.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} already exists; pass overwrite=True to replace it")
        shutil.rmtree(out / "scenes", ignore_errors=True)
        for name in (RANKS_FILE, LABELS_FILE, "synth_spec.json"):
            if (out / name).exists():
                (out / name).unlink()
    (out / "scenes").mkdir(parents=True, exist_ok=True)

    root_ss = np.random.SeedSequence(spec.seed)
    rows = []
    for si, scene_ss in enumerate(root_ss.spawn(spec.n_scenes)):
        render_ss, order_ss, noise_ss = scene_ss.spawn(3)
        style = STYLES[si % len(STYLES)]
        base = render_base_image(np.random.default_rng(render_ss), spec.image_size, style)
        sid = scene_name(si)
        (out / "scenes" / sid).mkdir(exist_ok=True)
        n = spec.n_devices
        if spec.degradation == "mixed":
            order_rng = np.random.default_rng(order_ss)
            # position of each device on each aspect's ladder (0 = mildest)
            positions = {a: order_rng.permutation(n) for a in ASPECTS}
        else:
            positions = {a: np.arange(n) for a in ASPECTS}
        for di, dev_ss in enumerate(noise_ss.spawn(n)):
            levels = None
            if spec.degradation == "mixed":
                levels = {a: spec.ladder[positions[a][di]] * MIXED_SCALE[a] * STYLE_SEVERITY[style][a]
                          for a in ASPECTS}
            img = degrade(base, spec, di, levels, np.random.default_rng(dev_ss))
            did = device_name(di)
            Image.fromarray(_to_uint8(img)).save(out / "scenes" / sid / f"{did}.png")
            rows.append([sid, did, *[int(positions[a][di]) + 1 for a in ASPECTS]])

    with open(out / RANKS_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKS_HEADER)
        w.writerows(rows)
    with open(out / "synth_spec.json", "w", encoding="utf-8") as fh:
        d = asdict(spec)
        d["image_size"], d["ladder"] = list(spec.image_size), list(spec.ladder)
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out

