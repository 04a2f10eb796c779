"""Grayscale conversion, local contrast normalization and patch cropping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np

BT601_WEIGHTS = (0.299, 0.587, 0.114)


class ImageDimensionError(ValueError):
    """Raised when an image has the wrong shape for an operation."""


@dataclass(frozen=True)
class LcnParams:
    """Window half-widths and stabilizer for local contrast normalization.

    The window spans rows ``i - half_width_p .. i + half_width_p`` and columns
    ``j - half_width_q .. j + half_width_q``, so the defaults give a 7x7 window.
    """

    half_width_p: int = 3
    half_width_q: int = 3
    stabilizer_c: float = 1.0

    def __post_init__(self):
        if self.half_width_p < 0 or self.half_width_q < 0:
            raise ValueError("window half-widths must be non-negative")
        if not self.stabilizer_c > 0:
            raise ValueError("stabilizer_c must be positive")

    @property
    def window_size(self) -> int:
        return (2 * self.half_width_p + 1) * (2 * self.half_width_q + 1)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    source_image_id: Hashable
    origin_row: int
    origin_col: int


def as_gray(img) -> np.ndarray:
    """Validate a grayscale image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageDimensionError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite pixels")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("grayscale pixels must lie in [0, 255]")
    return arr


def to_grayscale(rgb) -> np.ndarray:
    """Convert an ``(H, W, 3)`` RGB array in [0, 255] to BT.601 luma.

    A list of three equally sized channel planes is also accepted.
    """
    if isinstance(rgb, (list, tuple)):
        shapes = {np.shape(c) for c in rgb}
        if len(rgb) != 3 or len(shapes) != 1:
            raise ImageDimensionError(f"expected three equally sized channels, got shapes {shapes}")
        rgb = np.stack([np.asarray(c, dtype=np.float64) for c in rgb], axis=-1)
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageDimensionError(f"expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.min(initial=0.0) < 0 or arr.max(initial=0.0) > 255:
        raise ValueError("RGB values must lie in [0, 255]")
    r, g, b = BT601_WEIGHTS
    gray = r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    # rounding can push a white pixel a few ulps past 255
    return np.clip(gray, 0.0, 255.0)


def _window_sum(img: np.ndarray, p: int, q: int) -> np.ndarray:
    """Sum over the (2p+1)x(2q+1) window at every pixel, replicate padding.

    Accumulates shifted copies rather than a cumulative sum so that sums of
    grid-valued pixels (8-bit integers and the like) stay exact.
    """
    h, w = img.shape
    padded = np.pad(img, ((p, p), (q, q)), mode="edge")
    rows = np.zeros((h, w + 2 * q))
    for dp in range(2 * p + 1):
        rows += padded[dp:dp + h, :]
    out = np.zeros((h, w))
    for dq in range(2 * q + 1):
        out += rows[:, dq:dq + w]
    return out


def _window_stats(img: np.ndarray, params: LcnParams):
    """Return ``(numerator, sigma)`` with numerator = n*I - window_sum.

    Working with ``n * I - S`` instead of ``I - S / n`` makes both quantities
    exactly invariant to a constant offset for grid-valued inputs.
    """
    p, q, n = params.half_width_p, params.half_width_q, params.window_size
    h, w = img.shape
    s = _window_sum(img, p, q)
    padded = np.pad(img, ((p, p), (q, q)), mode="edge")
    sq = np.zeros((h, w))
    for dp in range(2 * p + 1):
        for dq in range(2 * q + 1):
            dev = n * padded[dp:dp + h, dq:dq + w] - s
            sq += dev * dev
    centered = n * img - s
    sigma = np.sqrt(sq) / (n * np.sqrt(n))
    return centered, sigma


def local_mean_map(img, params: LcnParams = LcnParams()) -> np.ndarray:
    arr = as_gray(img)
    return _window_sum(arr, params.half_width_p, params.half_width_q) / params.window_size


def local_std_map(img, params: LcnParams = LcnParams()) -> np.ndarray:
    """Population standard deviation over each pixel's window."""
    return _window_stats(as_gray(img), params)[1]


def local_mean(img, params: LcnParams, i: int, j: int) -> float:
    arr = as_gray(img)
    _check_index(arr, i, j)
    return float(local_mean_map(arr, params)[i, j])


def local_std(img, params: LcnParams, i: int, j: int) -> float:
    arr = as_gray(img)
    _check_index(arr, i, j)
    return float(local_std_map(arr, params)[i, j])


def _check_index(arr, i, j):
    if not (0 <= i < arr.shape[0] and 0 <= j < arr.shape[1]):
        raise IndexError(f"pixel ({i}, {j}) outside image of shape {arr.shape}")


def normalize(img, params: LcnParams = LcnParams()) -> np.ndarray:
    """Local contrast normalization ``(I - mu) / (sigma + C)``.

    Output has the input's shape. A constant image maps to exact zeros, and
    adding a constant offset leaves the output bit-identical whenever pixel
    values and offset are multiples of 1/1024 (so all 8-bit data) with the
    default 7x7 window.
    """
    arr = as_gray(img)
    centered, sigma = _window_stats(arr, params)
    return (centered / params.window_size) / (sigma + params.stabilizer_c)


def patch_grid(height: int, width: int, patch_size: int = 64, stride: int = 160):
    """Top-left corners of every complete patch, row-major."""
    if height < patch_size or width < patch_size:
        return []
    rows = range(0, height - patch_size + 1, stride)
    cols = range(0, width - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def patch_count(height: int, width: int, patch_size: int = 64, stride: int = 160) -> int:
    if height < patch_size or width < patch_size:
        return 0
    return ((height - patch_size) // stride + 1) * ((width - patch_size) // stride + 1)


def extract_patches(img, patch_size: int = 64, stride: int = 160,
                    image_id: Hashable = None, dtype=np.float32) -> list[Patch]:
    """Crop ``patch_size`` squares on a ``stride`` grid anchored at (0, 0).

    Incomplete windows at the right and bottom edges are dropped.
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ImageDimensionError(f"expected a 2-D image, got shape {arr.shape}")
    if stride < 1 or patch_size < 1:
        raise ValueError("patch_size and stride must be positive")
    h, w = arr.shape
    if h < patch_size or w < patch_size:
        raise ImageDimensionError(
            f"image of size {h}x{w} is smaller than the {patch_size}x{patch_size} patch; "
            "no patches can be extracted")
    return [
        Patch(np.ascontiguousarray(arr[r:r + patch_size, c:c + patch_size], dtype=dtype),
              image_id, r, c)
        for r, c in patch_grid(h, w, patch_size, stride)
    ]
