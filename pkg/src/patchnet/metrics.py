"""Heatmap-vs-mask overlap statistics: exact match, recall, AUROC.

All three are computed per image and then averaged.  Thresholding is
inclusive (value >= threshold counts as class 1).  Images whose mask lacks
positive pixels are excluded from average recall; images whose mask is
single-class are excluded from average AUROC.  Exclusion counts are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .patchcore import Heatmap, extract_heatmap
from .tensor import fsum


def _heatmap_values(heatmap) -> np.ndarray:
    v = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    return np.asarray(v, np.float64)


def _mask_bool(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        if m.shape[2] != 1:
            raise ValueError("mask must be single-channel")
        m = m[:, :, 0]
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1, 255))):
        raise ValueError(f"mask must be binary (0 / 1 / 255 values), found {vals[:8]}")
    return m > 0


def exact_match(heatmap, mask, threshold: float = 0.5) -> float:
    """Fraction of pixels where the thresholded heatmap equals the mask."""
    h = _heatmap_values(heatmap)
    m = _mask_bool(mask)
    if h.shape != m.shape:
        raise ValueError(f"heatmap {h.shape} and mask {m.shape} differ in dims")
    return float(np.mean((h >= threshold) == m))


def recall(heatmap, mask, threshold: float = 0.5) -> float:
    """Captured fraction of mask-positive pixels."""
    h = _heatmap_values(heatmap)
    m = _mask_bool(mask)
    if h.shape != m.shape:
        raise ValueError(f"heatmap {h.shape} and mask {m.shape} differ in dims")
    npos = int(m.sum())
    if npos == 0:
        raise ValueError("recall undefined: mask has no positive pixels; exclude image")
    return float(np.count_nonzero(h[m] >= threshold) / npos)


def auroc(heatmap, mask) -> float:
    """Mann-Whitney rank statistic of heatmap scores against the mask.

    Probability that a random positive pixel outscores a random negative one,
    ties counted half; computed with midranks in O(P log P).
    """
    h = _heatmap_values(heatmap).ravel()
    m = _mask_bool(mask).ravel()
    if h.shape != m.shape:
        raise ValueError("heatmap and mask differ in size")
    npos = int(m.sum())
    nneg = m.size - npos
    if npos == 0 or nneg == 0:
        raise ValueError("AUROC undefined: mask is single-class; exclude image")
    order = np.argsort(h, kind="stable")
    sorted_h = h[order]
    ranks = np.empty(m.size, np.float64)
    i = 0
    while i < m.size:
        j = i
        while j + 1 < m.size and sorted_h[j + 1] == sorted_h[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    u = ranks[m].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


@dataclass
class ImageOverlap:
    image_id: str
    exact_match: float
    recall: float | None
    auroc: float | None


@dataclass
class MaskOverlapReport:
    threshold: float
    per_image: list[ImageOverlap] = field(default_factory=list)
    average_exact_match: float = 0.0
    average_recall: float | None = None
    average_auroc: float | None = None
    recall_excluded: int = 0
    auroc_excluded: int = 0


def overlap_report(pairs, threshold: float = 0.5) -> MaskOverlapReport:
    """Statistics for (image_id, heatmap, mask) triples, with exclusion rules."""
    report = MaskOverlapReport(threshold=threshold)
    recalls, aurocs = [], []
    for image_id, heatmap, mask in pairs:
        em = exact_match(heatmap, mask, threshold)
        try:
            rc = recall(heatmap, mask, threshold)
            recalls.append(rc)
        except ValueError:
            rc = None
            report.recall_excluded += 1
        try:
            au = auroc(heatmap, mask)
            aurocs.append(au)
        except ValueError:
            au = None
            report.auroc_excluded += 1
        report.per_image.append(ImageOverlap(image_id, em, rc, au))
    if not report.per_image:
        raise ValueError("no heatmap/mask pairs to evaluate")
    report.average_exact_match = fsum(r.exact_match for r in report.per_image) / len(report.per_image)
    report.average_recall = fsum(recalls) / len(recalls) if recalls else None
    report.average_auroc = fsum(aurocs) / len(aurocs) if aurocs else None
    return report


def dataset_report(params, items, threshold: float = 0.5,
                   threads: int = 1) -> MaskOverlapReport:
    """Extract a heatmap per (image_id, image, mask) item and score the overlap."""
    masked = [(i, img, mask) for i, img, mask in items if mask is not None]
    if not masked:
        raise ValueError("no masks anywhere in the dataset")
    triples = ((i, extract_heatmap(params, img, source_image_id=i, threads=threads), mask)
               for i, img, mask in masked)
    return overlap_report(triples, threshold)


def format_report(report: MaskOverlapReport) -> str:
    """Stable key=value text schema, one aggregate block then one row per image."""
    def fmt(x):
        return "na" if x is None else f"{x:.6f}"

    lines = [
        f"threshold={report.threshold:g}",
        f"images={len(report.per_image)}",
        f"recall_excluded={report.recall_excluded}",
        f"auroc_excluded={report.auroc_excluded}",
        f"average_exact_match={fmt(report.average_exact_match)}",
        f"average_recall={fmt(report.average_recall)}",
        f"average_auroc={fmt(report.average_auroc)}",
    ]
    for row in report.per_image:
        lines.append(f"image={row.image_id} exact_match={fmt(row.exact_match)} "
                     f"recall={fmt(row.recall)} auroc={fmt(row.auroc)}")
    return "\n".join(lines) + "\n"
