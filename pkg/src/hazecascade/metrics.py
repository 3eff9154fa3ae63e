"""Image-quality and detection-quality metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5, normalised to sum 1) evaluated
only at fully-contained window positions, with ``c1 = (0.01 L)^2`` and
``c2 = (0.03 L)^2`` for dynamic range ``L = 1``.  AP is the non-interpolated
ranked sum ``sum_k P(k) rel(k) / n_relevant`` over detections pooled across
the corpus for one class; mAP averages it over classes that have ground truth.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)

K1 = 0.01
K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}", dimension="shape",
                         expected=a.shape, actual=b.shape)


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, max_val=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(max_val * max_val / err))


def gaussian_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    g = gaussian_1d(size, sigma)
    return np.outer(g, g)


def _filter_valid(img, g):
    """Separable 'valid' correlation with the 1-D taps ``g`` along both axes.

    Built from shifted-slice multiply-adds only: elementwise ufuncs give the
    same bits regardless of memory alignment, whereas SIMD reductions do not,
    and equal inputs must produce equal moments (SSIM(x, x) == 1 exactly).
    """
    k = g.size
    h, w = img.shape
    rows = g[0] * img[0:h - k + 1]
    for i in range(1, k):
        rows = rows + g[i] * img[i:h - k + 1 + i]
    out = g[0] * rows[:, 0:w - k + 1]
    for j in range(1, k):
        out = out + g[j] * rows[:, j:w - k + 1 + j]
    return out


def ssim_map(x, y, data_range=1.0):
    """Per-channel local SSIM at every valid window position, shape (C, H-10, W-10)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    if x.ndim != 3 or x.shape[1] < SSIM_WINDOW or x.shape[2] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs (C, H, W) with H, W >= {SSIM_WINDOW}, got {x.shape}",
                         dimension="H" if x.ndim == 3 and x.shape[1] < SSIM_WINDOW else "W",
                         expected=f">= {SSIM_WINDOW}", actual=x.shape)
    win = gaussian_1d()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    out = []
    for xc, yc in zip(x, y):
        mx = _filter_valid(xc, win)
        my = _filter_valid(yc, win)
        vx = _filter_valid(xc * xc, win) - mx * mx
        vy = _filter_valid(yc * yc, win) - my * my
        cxy = _filter_valid(xc * yc, win) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        out.append(num / den)
    return np.stack(out)


def ssim(x, y, data_range=1.0):
    m = ssim_map(x, y, data_range)
    return float(np.mean([ch.mean() for ch in m]))


# --- boxes ------------------------------------------------------------------

def iou(a, b):
    """IoU of two (x, y, w, h) boxes with top-left origin."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class MatchResult:
    rel: list          # rel flag per detection in rank order
    scores: list       # score per detection in rank order
    n_relevant: int    # number of ground-truth objects of the class

    def precision_recall(self):
        """List of (rank, precision, recall) points."""
        pts = []
        hits = 0
        for k, r in enumerate(self.rel, start=1):
            hits += r
            pts.append((k, hits / k, hits / self.n_relevant if self.n_relevant else 0.0))
        return pts


def _key(det):
    if hasattr(det, "box"):
        return det.image_id, det.class_id, det.score, det.box
    image_id, class_id, score, box = det
    return image_id, class_id, score, tuple(box)


def match_detections(dets, gts, class_id, iou_thresh=0.5):
    """Greedy score-ordered matching for one class.

    ``dets`` are DetectionRecords or ``(image_id, class_id, score, box)`` tuples;
    ``gts`` maps image_id -> list of ``(class_id, x, y, w, h)``.  Ties in score
    keep input order.  Each detection claims the unmatched same-class GT in its
    image with the highest IoU, if that IoU reaches ``iou_thresh``.
    """
    cand = [_key(d) for d in dets]
    cand = [c for c in cand if c[1] == class_id]
    order = sorted(range(len(cand)), key=lambda i: -cand[i][2])  # stable
    gt_by_image = {img: [tuple(g[1:]) for g in boxes if g[0] == class_id] for img, boxes in gts.items()}
    n_relevant = sum(len(v) for v in gt_by_image.values())
    used = {img: [False] * len(v) for img, v in gt_by_image.items()}
    rel, scores = [], []
    for i in order:
        img, _, score, box = cand[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_by_image.get(img, [])):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[img][best_j] = True
            rel.append(1)
        else:
            rel.append(0)
        scores.append(score)
    return MatchResult(rel=rel, scores=scores, n_relevant=n_relevant)


def average_precision(match):
    if match.n_relevant == 0:
        log.warning("average precision requested for a class with no ground truth; returning 0")
        return 0.0
    total = 0.0
    hits = 0
    for k, r in enumerate(match.rel, start=1):
        if r:
            hits += 1
            total += hits / k
    return total / match.n_relevant


def mean_average_precision(dets, gts, classes, iou_thresh=0.5):
    """Returns ``(mAP, {class_id: AP})`` over classes with at least one GT object.

    ``classes`` is an iterable of class ids; ``gts`` maps image_id -> GT boxes.
    """
    per_class = {}
    for c in classes:
        m = match_detections(dets, gts, c, iou_thresh)
        if m.n_relevant == 0:
            continue
        per_class[c] = average_precision(m)
    if not per_class:
        raise ValueError("no class has ground-truth objects; mAP is undefined")
    return sum(per_class.values()) / len(per_class), per_class
