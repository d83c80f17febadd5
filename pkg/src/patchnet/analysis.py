"""Closed-form convergence predictions and the synthetic datasets they govern.

For two-class data built from a background feature shared by both classes
plus a rectangle feature found only in class-1 images, the trained subnet's
output on pure background patches and pure rectangle patches is known in
closed form from the patch counts.  This module computes those predictions,
generates matching image sets, and checks trained models against them.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import SubnetParams, subnet_forward
from .patchcore import PatchConfig, chunk_patches


@dataclass
class FeatureCounts:
    """Per class-1 image: a patches of the shared feature, b of the class-1 one."""
    a: int
    b: int

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.a + self.b < 1:
            raise ValueError(f"need a >= 0, b >= 0, a + b >= 1; got a={self.a}, b={self.b}")


@dataclass
class ConvergencePoint:
    p0: float  # converged output on a pure shared-feature patch
    p1: float  # converged output on a pure class-1-feature patch


def converged_probs(fc: FeatureCounts) -> ConvergencePoint:
    """Loss-minimizing (p0, p1): p1 = 1 and p0 = (a-b)/(2a), floored at 0."""
    if fc.b == 0:
        raise ValueError(
            "no class-1 feature patches (b = 0): p1 is unconstrained and p0 can only "
            "approach its supremum 1/2")
    if fc.a > fc.b:
        p0 = float(Fraction(fc.a - fc.b, 2 * fc.a))
    else:
        p0 = 0.0
    return ConvergencePoint(p0=p0, p1=1.0)


def loss_landscape(fc: FeatureCounts, p0: float, p1: float) -> tuple[float, float, float]:
    """Per-image-pair loss -log(1-p0) - log((a*p0 + b*p1)/(a+b)) and its partials."""
    if not (0.0 < p0 < 1.0 and 0.0 < p1 < 1.0):
        raise ValueError(f"p0 and p1 must lie strictly inside (0, 1); got {p0}, {p1}")
    a, b = fc.a, fc.b
    mix = a * p0 + b * p1
    loss = -np.log1p(-p0) - np.log(mix / (a + b))
    dl_dp0 = -1.0 / (p0 - 1.0) - a / mix
    dl_dp1 = -b / mix
    return float(loss), float(dl_dp0), float(dl_dp1)


@dataclass
class SyntheticSpec:
    """Black images for class 0; class 1 adds one solid bright rectangle."""
    height: int
    width: int
    square_h: int
    square_w: int
    square_top: int = 0
    square_left: int = 0
    copies_per_class: int = 1
    high_value: int = 255  # raw pixel value inside the rectangle (1.0 normalized)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dims must be positive")
        if self.square_h < 1 or self.square_w < 1:
            raise ValueError("rectangle dims must be positive")
        if self.square_top < 0 or self.square_left < 0 \
                or self.square_top + self.square_h > self.height \
                or self.square_left + self.square_w > self.width:
            raise ValueError("rectangle does not fit inside the image")
        if self.copies_per_class < 1:
            raise ValueError("copies_per_class must be positive")
        if not 1 <= self.high_value <= 255:
            raise ValueError("high_value must be in 1..255")


def class1_image(spec: SyntheticSpec) -> np.ndarray:
    img = np.zeros((spec.height, spec.width, 1), np.uint8)
    img[spec.square_top:spec.square_top + spec.square_h,
        spec.square_left:spec.square_left + spec.square_w] = spec.high_value
    return img


def class1_mask(spec: SyntheticSpec) -> np.ndarray:
    """Binary mask of the class-1 rectangle."""
    img = np.zeros((spec.height, spec.width, 1), np.uint8)
    img[spec.square_top:spec.square_top + spec.square_h,
        spec.square_left:spec.square_left + spec.square_w] = 255
    return img


def generate_synthetic(spec: SyntheticSpec, rng=None) -> list[tuple[np.ndarray, int]]:
    """Deterministic labeled image list: all class-0 copies, then class-1."""
    zero = np.zeros((spec.height, spec.width, 1), np.uint8)
    one = class1_image(spec)
    out = [(zero.copy(), 0) for _ in range(spec.copies_per_class)]
    out += [(one.copy(), 1) for _ in range(spec.copies_per_class)]
    return out


def count_pure_patches(image: np.ndarray, cfg: PatchConfig,
                       high: int = 255) -> tuple[int, int, int]:
    """(all-zero, all-high, mixed) patch counts on the image's stride grid."""
    grid = chunk_patches(image, cfg)
    n_zero = n_one = n_mixed = 0
    for patch in grid.patches:
        if not patch.any():
            n_zero += 1
        elif np.all(patch == high):
            n_one += 1
        else:
            n_mixed += 1
    return n_zero, n_one, n_mixed


def grid_feature_counts(image: np.ndarray, cfg: PatchConfig,
                        high: int = 255) -> FeatureCounts:
    """Exact feature counts of a class-1 image on its training grid.

    a = patches containing only background; b = patches containing any bright
    pixels.  Patches straddling the rectangle border carry class-1-only
    evidence, so they converge with the pure-rectangle patches and belong in
    b; this also keeps a + b equal to the class-0 image's patch count.
    """
    n_zero, n_one, n_mixed = count_pure_patches(image, cfg, high)
    return FeatureCounts(a=n_zero, b=n_one + n_mixed)


def centered_pure_counts(image: np.ndarray, patch_h: int, patch_w: int,
                         high: int = 255) -> tuple[int, int, int]:
    """(all-zero, all-high, mixed) counts over all stride-1 centered patches.

    One patch per pixel, zero padded at borders, matching heatmap extraction;
    the all-high count is the exact full-interior enumeration.
    """
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError("pure-patch counting expects a single channel")
        img = img[:, :, 0]
    m, n = img.shape
    off_y, off_x = (patch_h - 1) // 2, (patch_w - 1) // 2
    padded = np.zeros((m + patch_h - 1, n + patch_w - 1), img.dtype)
    padded[off_y:off_y + m, off_x:off_x + n] = img
    win = sliding_window_view(padded, (patch_h, patch_w))
    lo = win.min(axis=(2, 3))
    hi = win.max(axis=(2, 3))
    n_zero = int(np.count_nonzero(hi == 0))
    n_one = int(np.count_nonzero(lo == high))
    return n_zero, n_one, m * n - n_zero - n_one


@dataclass
class ConvergenceReport:
    predicted: ConvergencePoint
    empirical_p0: float   # subnet output on an all-zeros probe patch
    empirical_p1: float   # subnet output on an all-ones probe patch
    tolerance: float
    p0_ok: bool
    p1_ok: bool

    @property
    def passed(self) -> bool:
        return self.p0_ok and self.p1_ok


def probe_outputs(params: SubnetParams) -> tuple[float, float]:
    """Subnet outputs on synthetic all-zeros and all-ones (normalized) patches."""
    m, n, c = params.patch_dims
    zeros = np.zeros((1, c, m, n), np.float32)
    ones = np.ones((1, c, m, n), np.float32)
    q0 = float(subnet_forward(params, zeros)[0])
    q1 = float(subnet_forward(params, ones)[0])
    return q0, q1


def verify_convergence(params: SubnetParams, spec: SyntheticSpec,
                       cfg: PatchConfig, tolerance: float) -> ConvergenceReport:
    """Compare trained probe outputs against the closed-form prediction.

    The prediction comes from the exact patch counts of the class-1 image on
    the given training grid (see grid_feature_counts).
    """
    predicted = converged_probs(grid_feature_counts(class1_image(spec), cfg, spec.high_value))
    q0, q1 = probe_outputs(params)
    return ConvergenceReport(
        predicted=predicted,
        empirical_p0=q0,
        empirical_p1=q1,
        tolerance=tolerance,
        p0_ok=abs(q0 - predicted.p0) <= tolerance,
        p1_ok=q1 >= 1.0 - tolerance,
    )
