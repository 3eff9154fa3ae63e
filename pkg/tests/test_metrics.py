import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hazecascade.errors import ShapeError
from hazecascade.imageio import DetectionRecord
from hazecascade.metrics import (MatchResult, average_precision, gaussian_window, iou, match_detections,
                                 mean_average_precision, mse, psnr, ssim)

C1 = 0.01 ** 2
unit = st.floats(0, 1)
img = hnp.arrays(np.float64, (3, 12, 12), elements=unit)


# ---- MSE / PSNR --------------------------------------------------------------

def test_mse_examples():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4))
    assert mse(x, x) == 0.0
    assert mse(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 1.0
    assert mse(np.array([0.0, 0.5]), np.array([0.5, 0.5])) == 0.125
    with pytest.raises(ShapeError):
        mse(np.zeros(2), np.zeros(3))


def test_psnr_examples():
    x = np.random.default_rng(1).uniform(size=(3, 4, 4))
    assert psnr(x, x) == math.inf
    assert psnr(np.zeros(100), np.full(100, 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.zeros(4), np.ones(4)) == 0.0


@given(img, img)
def test_psnr_mse_consistency(a, b):
    m = mse(a, b)
    if m > 0:
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / m), rel=1e-12)
    else:
        assert psnr(a, b) == math.inf


# ---- SSIM --------------------------------------------------------------------

def test_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert w[5, 5] == w.max()


def test_ssim_identity_and_constants():
    x = np.random.default_rng(2).uniform(size=(3, 16, 16))
    assert abs(ssim(x, x) - 1.0) < 1e-12
    val = ssim(np.zeros((3, 11, 11)), np.ones((3, 11, 11)))
    assert abs(val - C1 / (1 + C1)) < 1e-12
    assert val == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_requires_window_size():
    with pytest.raises(ShapeError):
        ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def _ssim_direct(x, y):
    """Per-position SSIM from the window-weighted moments, looping over valid positions."""
    w = gaussian_window()
    c2 = 0.03 ** 2
    vals = []
    for c in range(3):
        for i in range(x.shape[1] - 10):
            for j in range(x.shape[2] - 10):
                px, py = x[c, i:i + 11, j:j + 11], y[c, i:i + 11, j:j + 11]
                mx, my = np.sum(w * px), np.sum(w * py)
                vx = np.sum(w * (px - mx) ** 2)
                vy = np.sum(w * (py - my) ** 2)
                cxy = np.sum(w * (px - mx) * (py - my))
                vals.append((2 * mx * my + C1) * (2 * cxy + c2) / ((mx * mx + my * my + C1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_matches_direct_evaluation():
    g = np.random.default_rng(4)
    x = g.uniform(size=(3, 13, 14))
    y = np.clip(x + g.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(_ssim_direct(x, y), abs=1e-10)


@given(img)
def test_ssim_of_equal_copies_is_exactly_one(a):
    # a copy at a different address must not perturb the moments
    b = np.empty((3, 12, 13))[:, :, 1:]
    b[...] = a
    assert ssim(a, b) == 1.0


@settings(max_examples=50)
@given(img, img)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == ssim(b, a)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


# ---- IoU ---------------------------------------------------------------------

def test_iou_examples():
    assert iou((1, 2, 3, 4), (1, 2, 3, 4)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 1, 1)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)


# ---- matching / AP -----------------------------------------------------------

def test_match_examples():
    gts = {"a": [(0, 0.0, 0.0, 10.0, 10.0)]}
    assert match_detections([("a", 0, 0.9, (0, 0, 10, 10))], gts, 0).rel == [1]
    two = [("a", 0, 0.9, (0, 0, 10, 10)), ("a", 0, 0.8, (1, 0, 10, 10))]
    assert match_detections(two, gts, 0).rel == [1, 0]
    # 4x10 inside 10x10: IoU 0.4 -> miss
    low = [("a", 0, 0.9, (0, 0, 4, 10))]
    assert iou((0, 0, 4, 10), (0, 0, 10, 10)) == pytest.approx(0.4)
    assert match_detections(low, gts, 0).rel == [0]


def test_ap_examples():
    assert average_precision(MatchResult([1, 1, 1], [0.9, 0.8, 0.7], 3)) == 1.0
    assert average_precision(MatchResult([1, 0, 1], [3, 2, 1], 2)) == pytest.approx(5 / 6)
    assert average_precision(MatchResult([0, 0], [2, 1], 1)) == 0.0
    assert average_precision(MatchResult([], [], 0)) == 0.0


def test_map_examples():
    gts = {"a": [(0, 0, 0, 5, 5), (0, 10, 10, 5, 5)], "b": [(1, 3, 3, 4, 4)]}
    perfect = [DetectionRecord(k, c, 0.5, x, y, w, h) for k, bs in gts.items() for c, x, y, w, h in bs]
    m, per = mean_average_precision(perfect, gts, range(3))
    assert m == 1.0 and set(per) == {0, 1}
    single = {"a": [(0, 0, 0, 5, 5)]}
    m, per = mean_average_precision([DetectionRecord("a", 0, 0.3, 0, 0, 5, 5)], single, [0])
    assert m == per[0] == 1.0
    with pytest.raises(ValueError):
        mean_average_precision([], {"a": []}, [0])


# ---- brute-force oracle -------------------------------------------------------

def oracle_map(dets, gts, n_classes, thr=0.5):
    """Independent mAP: numpy IoU matrices, stable argsort ranking, precision by prefix sums."""
    aps = []
    for c in range(n_classes):
        g_img, g_box = [], []
        for img_id, boxes in gts.items():
            for b in boxes:
                if b[0] == c:
                    g_img.append(img_id)
                    g_box.append(b[1:])
        if not g_box:
            continue
        cand = [d for d in dets if d[1] == c]
        order = np.argsort([-d[2] for d in cand], kind="stable")
        g_box = np.array(g_box, dtype=float).reshape(-1, 4)
        taken = np.zeros(len(g_box), bool)
        rel = np.zeros(len(cand), int)
        for k, i in enumerate(order):
            img_id, _, _, (x, y, w, h) = cand[i]
            ix = np.clip(np.minimum(x + w, g_box[:, 0] + g_box[:, 2]) - np.maximum(x, g_box[:, 0]), 0, None)
            iy = np.clip(np.minimum(y + h, g_box[:, 1] + g_box[:, 3]) - np.maximum(y, g_box[:, 1]), 0, None)
            inter = ix * iy
            ious = inter / (w * h + g_box[:, 2] * g_box[:, 3] - inter)
            ok = np.array([gi == img_id for gi in g_img]) & ~taken
            if ok.any():
                j = np.flatnonzero(ok)[np.argmax(ious[ok])]
                if ious[j] >= thr:
                    taken[j] = True
                    rel[k] = 1
        precision = np.cumsum(rel) / np.arange(1, len(rel) + 1)
        aps.append(float(np.sum(precision * rel)) / len(g_box))
    return float(np.mean(aps)) if aps else None


def random_instance(g):
    """<= 6 detections, <= 4 GTs, <= 3 classes on a coarse grid so overlaps and ties are common."""
    n_cls = int(g.integers(1, 4))
    imgs = ["p", "q"][: int(g.integers(1, 3))]
    coord = lambda: float(g.integers(0, 6))
    size = lambda: float(g.integers(1, 5))
    gts = {i: [] for i in imgs}
    for _ in range(int(g.integers(1, 5))):
        gts[imgs[int(g.integers(len(imgs)))]].append((int(g.integers(n_cls)), coord(), coord(), size(), size()))
    dets = []
    for _ in range(int(g.integers(0, 7))):
        dets.append((imgs[int(g.integers(len(imgs)))], int(g.integers(n_cls)),
                     float(g.integers(1, 5)) / 4, (coord(), coord(), size(), size())))
    return dets, gts, n_cls


def check_oracle(n, seed):
    g = np.random.default_rng(seed)
    for _ in range(n):
        dets, gts, n_cls = random_instance(g)
        m, _ = mean_average_precision(dets, gts, range(n_cls))
        assert m == oracle_map(dets, gts, n_cls), (dets, gts)


def test_map_matches_oracle_small():
    check_oracle(300, seed=11)


@given(st.integers(0, 2**31))
def test_ap_invariant_to_monotone_rescaling(seed):
    g = np.random.default_rng(seed)
    dets, gts, n_cls = random_instance(g)
    m1, _ = mean_average_precision(dets, gts, range(n_cls))
    warped = [(i, c, math.exp(3 * s) - 0.5, b) for i, c, s, b in dets]
    m2, _ = mean_average_precision(warped, gts, range(n_cls))
    assert m1 == m2
    assert 0.0 <= m1 <= 1.0


@given(st.integers(0, 2**31))
def test_match_invariants(seed):
    dets, gts, n_cls = random_instance(np.random.default_rng(seed))
    for c in range(n_cls):
        m = match_detections(dets, gts, c)
        assert sum(m.rel) <= m.n_relevant
        assert m.scores == sorted(m.scores, reverse=True)
        rec = [r for _, _, r in m.precision_recall()]
        assert rec == sorted(rec)
