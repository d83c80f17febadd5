"""Whole-image machinery: patch chunking, mean aggregation, heatmaps.

The global prediction for an image is the plain arithmetic mean of the
subnet's per-patch probabilities.  The mean uses an exactly rounded sum, so
it is bit-identical under any permutation of the patches.  Heatmaps evaluate
the subnet on the patch centered at every pixel of the zero-padded image.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn import SubnetParams, subnet_forward
from .tensor import fsum

PIXEL_MAX = 255  # N - 1 for 8-bit images

COVERAGE_MODES = ("drop_remainder", "clamp_to_edge")


@dataclass
class PatchConfig:
    patch_h: int
    patch_w: int
    stride_y: int
    stride_x: int
    coverage_mode: str = "clamp_to_edge"

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch dims must be positive")
        if self.stride_y < 1 or self.stride_x < 1:
            raise ValueError("strides must be positive")
        if self.coverage_mode not in COVERAGE_MODES:
            raise ValueError(f"coverage_mode must be one of {COVERAGE_MODES}")


@dataclass
class PatchGrid:
    patches: np.ndarray                 # (l, c, m', n') raw pixel values as float32
    positions: list[tuple[int, int]]    # top-left (row, col) anchors


@dataclass
class GlobalPrediction:
    p_global: float
    patch_probs: np.ndarray


@dataclass
class Heatmap:
    values: np.ndarray                  # (m, n) in [0, 1]
    source_image_id: str = ""


def _as_image_array(image: np.ndarray) -> np.ndarray:
    """Canonicalize to (m, n, c)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"expected (m, n) or (m, n, c) image, got shape {image.shape}")
    return image


def axis_anchors(size: int, patch: int, stride: int, coverage_mode: str) -> list[int]:
    """Patch anchor offsets along one axis."""
    if patch > size:
        raise ValueError(f"patch extent {patch} exceeds image extent {size}")
    anchors = list(range(0, size - patch + 1, stride))
    last = size - patch
    if coverage_mode == "clamp_to_edge" and anchors[-1] != last:
        anchors.append(last)
    return anchors


def chunk_patches(image: np.ndarray, cfg: PatchConfig) -> PatchGrid:
    """Crop the stride grid of patches; anchors are clamped or dropped at edges."""
    img = _as_image_array(image)
    m, n, c = img.shape
    rows = axis_anchors(m, cfg.patch_h, cfg.stride_y, cfg.coverage_mode)
    cols = axis_anchors(n, cfg.patch_w, cfg.stride_x, cfg.coverage_mode)
    patches = np.empty((len(rows) * len(cols), c, cfg.patch_h, cfg.patch_w), np.float32)
    positions = []
    k = 0
    for r in rows:
        for col in cols:
            crop = img[r:r + cfg.patch_h, col:col + cfg.patch_w]
            patches[k] = crop.transpose(2, 0, 1)
            positions.append((r, col))
            k += 1
    return PatchGrid(patches, positions)


def normalize_patches(patches: np.ndarray) -> np.ndarray:
    """Map raw 8-bit pixel values onto [0, 1] reals for the subnet."""
    return np.asarray(patches, np.float32) / np.float32(PIXEL_MAX)


def global_forward(params: SubnetParams, image: np.ndarray,
                   cfg: PatchConfig) -> GlobalPrediction:
    """Mean of the subnet's outputs over the image's patch grid."""
    grid = chunk_patches(image, cfg)
    probs = subnet_forward(params, normalize_patches(grid.patches))
    return GlobalPrediction(p_global=fsum(probs) / len(probs), patch_probs=probs)


def center_anchor(i: int, j: int, patch_h: int, patch_w: int) -> tuple[int, int]:
    """Top-left anchor of the patch centered at (i, j); even dims bias up-left."""
    return i - (patch_h - 1) // 2, j - (patch_w - 1) // 2


def cut_centered_patch(image: np.ndarray, i: int, j: int,
                       patch_h: int, patch_w: int) -> np.ndarray:
    """The (c, m', n') raw patch centered at pixel (i, j), zero padded at borders."""
    img = _as_image_array(image)
    m, n, c = img.shape
    top, left = center_anchor(i, j, patch_h, patch_w)
    patch = np.zeros((patch_h, patch_w, c), np.float32)
    r0, r1 = max(top, 0), min(top + patch_h, m)
    c0, c1 = max(left, 0), min(left + patch_w, n)
    if r0 < r1 and c0 < c1:
        patch[r0 - top:r1 - top, c0 - left:c1 - left] = img[r0:r1, c0:c1]
    return patch.transpose(2, 0, 1)


def extract_heatmap(params: SubnetParams, image: np.ndarray,
                    source_image_id: str = "", threads: int = 1) -> Heatmap:
    """Subnet output on the zero-padded patch centered at every pixel.

    Rows are evaluated independently (optionally across `threads` workers,
    each writing its own output rows); per-pixel values are identical to
    evaluating subnet_forward on each centered patch by itself.
    """
    img = _as_image_array(image)
    m, n, c_img = img.shape
    ph, pw, c = params.patch_dims
    if c_img != c:
        raise ValueError(f"image has {c_img} channels, params expect {c}")
    # One padded copy; the patch centered at (i, j) starts at (i, j) in it.
    off_y, off_x = (ph - 1) // 2, (pw - 1) // 2
    padded = np.zeros((m + ph - 1, n + pw - 1, c), np.float32)
    padded[off_y:off_y + m, off_x:off_x + n] = img
    values = np.empty((m, n), np.float64)

    def run_row(i: int) -> None:
        row = np.empty((n, c, ph, pw), np.float32)
        for j in range(n):
            row[j] = padded[i:i + ph, j:j + pw].transpose(2, 0, 1)
        values[i] = subnet_forward(params, normalize_patches(row))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_row, range(m)))
    else:
        for i in range(m):
            run_row(i)
    return Heatmap(values=values, source_image_id=source_image_id)


def heatmap_to_image(h: Heatmap) -> np.ndarray:
    """Render probabilities as 8-bit grayscale; white = class 1, round half up."""
    v = np.asarray(h.values)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("heatmap values outside [0, 1]")
    return np.floor(v * PIXEL_MAX + 0.5).astype(np.uint8)
