"""Segmentation and saliency measures."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError

NLL_CLAMP = 1e-7
FBETA_SQ = 0.3


def _pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def jaccard(pred_mask, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    p, g = _pair(pred_mask, gt)
    p = p.astype(bool)
    g = g.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return m & ~eroded


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape)))


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def boundary_f(pred_mask, gt, tol: int | None = None) -> float:
    """Boundary F-measure with a disc-shaped matching tolerance (in pixels)."""
    p, g = _pair(pred_mask, gt)
    if tol is None:
        tol = default_tolerance(p.shape)
    bp, bg = boundary(p), boundary(g)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tol > 0:
        disk = _disk(tol)
        near_g = ndimage.binary_dilation(bg, structure=disk)
        near_p = ndimage.binary_dilation(bp, structure=disk)
    else:
        near_g, near_p = bg, bp
    precision = np.count_nonzero(bp & near_g) / n_p
    recall = np.count_nonzero(bg & near_p) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((p.astype(float) - g.astype(float)) ** 2))


def nll(pred, gt) -> float:
    """Mean -log p(gt class); ``pred`` is the foreground probability per pixel."""
    p, g = _pair(pred, gt)
    p = np.clip(p.astype(float), NLL_CLAMP, 1 - NLL_CLAMP)
    prob = np.where(g.astype(bool), p, 1 - p)
    return float(-np.mean(np.log(prob)))


def saliency_scores(pred, gt, beta_sq: float = FBETA_SQ) -> tuple[float, float]:
    """(MAE, F_beta) with the adaptive threshold min(2*mean(pred), 1).

    A pixel is salient when ``pred >= threshold`` and ``pred > 0``, so an
    all-zero map selects nothing.
    """
    p, g = _pair(pred, gt)
    p = p.astype(float)
    g = g.astype(bool)
    mae = float(np.mean(np.abs(p - g)))
    thr = min(2.0 * float(p.mean()), 1.0)
    sel = (p >= thr) & (p > 0)
    tp = np.count_nonzero(sel & g)
    if tp == 0:
        return mae, 0.0
    precision = tp / np.count_nonzero(sel)
    recall = tp / np.count_nonzero(g)
    f = (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)
    return mae, float(f)


def best_of_batch(masks, gt) -> tuple[int, np.ndarray, float]:
    """Mask with the highest J against ``gt``; ties go to the lowest index."""
    masks = np.asarray(masks)
    scores = [jaccard(m, gt) for m in masks]
    k = int(np.argmax(scores))
    return k, masks[k], scores[k]


def mean_pairwise_jaccard(masks) -> float:
    masks = np.asarray(masks)
    n = len(masks)
    if n < 2:
        return 1.0
    vals = [jaccard(masks[i], masks[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(vals))


@dataclass
class MetricRow:
    sequence: str
    frame: int
    j: float
    f: float
    mse: float
    nll: float
    mae: float
    fbeta: float


def evaluate_pair(sequence: str, frame: int, prob, mask, gt) -> MetricRow:
    """All per-frame scores for one prediction (probability map + binary mask)."""
    mae, fb = saliency_scores(prob, gt)
    return MetricRow(sequence, frame, jaccard(mask, gt), boundary_f(mask, gt), mse(prob, gt), nll(prob, gt), mae, fb)


def write_rows(path, rows) -> None:
    names = [f.name for f in fields(MetricRow)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
