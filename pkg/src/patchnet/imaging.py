"""Image I/O, preprocessing and augmentation.

Images are uint8 numpy arrays shaped (m, n, c) with c in {1, 3}.  PNG (and
anything else Pillow reads) is supported for real data; ASCII portable
graymap/pixmap (P2/P3) files are read and written by hand so test fixtures
stay human-checkable.  Rounding is half-up throughout.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (m, n, c) image with c in {{1, 3}}, got shape {np.asarray(image).shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _read_pnm_tokens(text: str) -> list[str]:
    tokens = []
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        tokens += body.split()
    return tokens


def load_image(path: str) -> np.ndarray:
    """Decode a raster file to (m, n, c) uint8; c is 1 or 3."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm"):
        with open(path, "r", encoding="ascii") as f:
            tokens = _read_pnm_tokens(f.read())
        if not tokens or tokens[0] not in ("P2", "P3"):
            raise ValueError(f"{path}: expected ASCII P2/P3 header")
        kind = tokens[0]
        try:
            w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
            values = [int(t) for t in tokens[4:]]
        except (ValueError, IndexError) as e:
            raise ValueError(f"{path}: malformed portable map: {e}") from None
        c = 1 if kind == "P2" else 3
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
        if len(values) != w * h * c:
            raise ValueError(f"{path}: expected {w * h * c} samples, got {len(values)}")
        arr = np.array(values, np.int64).reshape(h, w, c)
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{path}: sample out of range 0..255")
        return arr.astype(np.uint8)
    try:
        with PILImage.open(path) as im:
            if im.mode in ("1", "L", "I", "I;16", "LA"):
                im = im.convert("L")
                return np.asarray(im, np.uint8)[:, :, None]
            im = im.convert("RGB")
            return np.asarray(im, np.uint8)
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot load image {path}: {e}") from None


def save_image(image: np.ndarray, path: str) -> None:
    """Encode to the format implied by the extension (lossless round-trip)."""
    img = _check_image(image)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if img.shape[2] != 1:
            raise ValueError("PGM requires a single-channel image")
        lines = [f"P2\n{img.shape[1]} {img.shape[0]}\n255\n"]
        for row in img[:, :, 0]:
            lines.append(" ".join(str(int(v)) for v in row) + "\n")
        with open(path, "w", encoding="ascii") as f:
            f.writelines(lines)
        return
    if ext == ".ppm":
        if img.shape[2] != 3:
            raise ValueError("PPM requires a three-channel image")
        lines = [f"P3\n{img.shape[1]} {img.shape[0]}\n255\n"]
        for row in img:
            lines.append(" ".join(str(int(v)) for v in row.ravel()) + "\n")
        with open(path, "w", encoding="ascii") as f:
            f.writelines(lines)
        return
    if img.shape[2] == 1:
        PILImage.fromarray(img[:, :, 0], "L").save(path)
    else:
        PILImage.fromarray(img, "RGB").save(path)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def gamma_correct(image: np.ndarray, gamma: float = 2.2, encode: bool = False) -> np.ndarray:
    """Per-channel power-law remap via a 256-entry table.

    Default is the decode (brightening) direction out = 255*(in/255)^(1/gamma);
    encode=True uses exponent gamma instead.  0 and 255 are fixed points.
    """
    img = _check_image(image)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    exponent = gamma if encode else 1.0 / gamma
    lut = _round_half_up(255.0 * (np.arange(256, dtype=np.float64) / 255.0) ** exponent)
    return lut.astype(np.uint8)[img]


def color_constancy(image: np.ndarray, minkowski_p: float = 6.0) -> np.ndarray:
    """Shades-of-gray channel gain correction (gray world when p = 1).

    Each channel's illuminant is its Minkowski-p mean; channels are scaled so
    all illuminants match their average.  All-zero channels are left alone.
    """
    img = _check_image(image)
    if img.shape[2] != 3:
        raise ValueError(f"color constancy needs 3 channels, got {img.shape[2]}")
    x = img.astype(np.float64)
    e = np.power(np.mean(np.power(x, minkowski_p), axis=(0, 1)), 1.0 / minkowski_p)
    target = e.mean()
    scale = np.where(e > 0, target / np.where(e > 0, e, 1.0), 1.0)
    out = np.clip(_round_half_up(x * scale), 0, 255)
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def resize(image: np.ndarray, new_m: int, new_n: int) -> np.ndarray:
    """Bilinear resize with corner alignment; a constant image stays constant.

    Output pixel (i, j) samples input coordinates i*(m-1)/(new_m-1) (and
    likewise for columns); a target extent of 1 samples the axis center.
    """
    img = _check_image(image)
    if new_m < 1 or new_n < 1:
        raise ValueError("target dims must be positive")
    m, n, _ = img.shape
    sy = np.full(new_m, (m - 1) / 2.0) if new_m == 1 else np.arange(new_m) * ((m - 1) / (new_m - 1))
    sx = np.full(new_n, (n - 1) / 2.0) if new_n == 1 else np.arange(new_n) * ((n - 1) / (new_n - 1))
    y0 = np.minimum(sy.astype(np.int64), m - 1)
    x0 = np.minimum(sx.astype(np.int64), n - 1)
    y1 = np.minimum(y0 + 1, m - 1)
    x1 = np.minimum(x0 + 1, n - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    x = img.astype(np.float64)
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bot = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(_round_half_up(out), 0, 255).astype(np.uint8)


def augment(image: np.ndarray, op: str, scale: float | None = None,
            rng=None, anchor: str = "center") -> np.ndarray:
    """rotate180 / hflip / vflip / zoom(scale in (1.0, 1.2]).

    Zoom crops a 1/scale extent (centered, or uniformly placed when
    anchor="random" and an Rng is given) and resizes back to the input dims.
    """
    img = _check_image(image)
    if op == "rotate180":
        return img[::-1, ::-1].copy()
    if op == "hflip":
        return img[:, ::-1].copy()
    if op == "vflip":
        return img[::-1].copy()
    if op == "zoom":
        if scale is None or not 1.0 < scale <= 1.2:
            raise ValueError(f"zoom scale must be in (1.0, 1.2], got {scale}")
        m, n, _ = img.shape
        ch = max(int(_round_half_up(np.float64(m / scale))), 1)
        cw = max(int(_round_half_up(np.float64(n / scale))), 1)
        if anchor == "random":
            if rng is None:
                raise ValueError("random-anchor zoom needs an rng")
            top = rng.randint(m - ch + 1)
            left = rng.randint(n - cw + 1)
        else:
            top, left = (m - ch) // 2, (n - cw) // 2
        crop = img[top:top + ch, left:left + cw]
        return resize(crop, m, n)
    raise ValueError(f"unknown augment op {op!r}")


# ---------------------------------------------------------------------------
# Dataset layout: <root>/<split>/<class>/<image>, masks in <root>/<split>/masks/
# ---------------------------------------------------------------------------

IMAGE_EXTS = (".png", ".pgm", ".ppm", ".bmp", ".jpg", ".jpeg")


@dataclass
class DatasetIndex:
    split: str
    entries: list[tuple[str, int, str | None]]  # (image path, label, mask path or None)


def scan_dataset(root: str, split: str) -> DatasetIndex:
    """Resolve (image, label, mask) triples from the directory layout."""
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"missing split directory {split_dir}")
    mask_dir = os.path.join(split_dir, "masks")
    entries = []
    for label in (0, 1):
        class_dir = os.path.join(split_dir, str(label))
        if not os.path.isdir(class_dir):
            continue
        for name in sorted(os.listdir(class_dir)):
            if os.path.splitext(name)[1].lower() not in IMAGE_EXTS:
                continue
            mask = None
            if os.path.isdir(mask_dir):
                for ext in IMAGE_EXTS:
                    cand = os.path.join(mask_dir, os.path.splitext(name)[0] + ext)
                    if os.path.isfile(cand):
                        mask = cand
                        break
            entries.append((os.path.join(class_dir, name), label, mask))
    if not entries:
        raise FileNotFoundError(f"no images under {split_dir}")
    return DatasetIndex(split=split, entries=entries)


def write_index(index: DatasetIndex, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# split={index.split}\n")
        for img, label, mask in index.entries:
            f.write(f"{img}\t{label}\t{mask if mask else '-'}\n")


def load_labeled_images(index: DatasetIndex) -> list[tuple[np.ndarray, int]]:
    return [(load_image(p), y) for p, y, _ in index.entries]
