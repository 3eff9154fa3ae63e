"""Synthetic clear/foggy scene pairs from the atmospheric scattering model.

Hazy image formation: ``I = J * t + A * (1 - t)`` with ``t = exp(-beta * depth)``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CLASS_NAMES
from .imageio import (DatasetManifest, ManifestRecord, float_to_u8, read_ppm, save_manifest,
                      u8_to_float, write_ppm, write_tensor)
from .tensorcore.rng import Rng, splitmix64

log = logging.getLogger(__name__)

CIRCLE, SQUARE, TRIANGLE = 0, 1, 2


@dataclass
class FogParams:
    beta: float = 0.08
    airlight: tuple = (0.85, 0.85, 0.85)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        self.airlight = tuple(float(a) for a in self.airlight)
        if len(self.airlight) != 3 or not all(0.0 <= a <= 1.0 for a in self.airlight):
            raise ValueError(f"airlight must be three values in [0, 1], got {self.airlight}")


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 64
    count_range: tuple = (2, 8)
    size_range: tuple = (8, 24)
    depth_range: tuple = (2.0, 20.0)
    # background: two random endpoint colours, blended vertically with a mild horizontal tilt
    background_tilt: float = 0.15
    min_contrast: float = 0.25
    classes: tuple = field(default=CLASS_NAMES)

    def __post_init__(self):
        self.count_range = tuple(int(c) for c in self.count_range)
        self.size_range = tuple(int(s) for s in self.size_range)
        self.depth_range = tuple(float(d) for d in self.depth_range)
        near, far = self.depth_range
        if not 0 < near < far:
            raise ValueError(f"depth range must satisfy 0 < near < far, got {self.depth_range}")
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"object count range must satisfy 1 <= lo <= hi, got {self.count_range}")
        smin, smax = self.size_range
        if smin < 2 or smax < smin or smax > self.size:
            raise ValueError(f"invalid object size range {self.size_range} for canvas {self.size}")


@dataclass
class Scene:
    clear: np.ndarray   # (3, H, W) float, already quantised to multiples of 1/255
    depth: np.ndarray   # (1, H, W) metres
    boxes: list         # [(class_id, x, y, w, h)]
    masks: list         # per-object boolean (H, W) masks, same order as boxes


def transmission_from_depth(depth, beta):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be positive and finite")
    return np.exp(-float(beta) * depth)


def apply_fog(clear, t, airlight):
    clear = np.asarray(clear, dtype=np.float64)
    a = np.asarray(airlight, dtype=np.float64).reshape(-1, 1, 1)
    return clear * t + a * (1.0 - t)


def shape_mask(kind, x0, y0, s, size):
    """Boolean (size, size) mask of a shape whose bounding square starts at (x0, y0) with side s.

    Pixel (r, c) is covered when its centre (c + 0.5, r + 0.5) falls inside the shape.
    """
    rr, cc = np.mgrid[0:size, 0:size]
    px = cc + 0.5
    py = rr + 0.5
    if kind == SQUARE:
        return (px > x0) & (px < x0 + s) & (py > y0) & (py < y0 + s)
    if kind == CIRCLE:
        cx, cy, r = x0 + s / 2.0, y0 + s / 2.0, s / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == TRIANGLE:
        # apex at top centre, base along the bottom edge
        u = (py - y0) / s
        half = 0.5 * s * u
        cx = x0 + s / 2.0
        return (u >= 0) & (u <= 1) & (np.abs(px - cx) <= half)
    raise ValueError(f"unknown shape kind {kind}")


def tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = rows[0], rows[-1]
    x0, x1 = cols[0], cols[-1]
    return float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1)


def _background(spec, rng):
    n = spec.size
    top = rng.uniform(0.1, 0.9, 3)
    bottom = rng.uniform(0.1, 0.9, 3)
    tilt = rng.uniform(-spec.background_tilt, spec.background_tilt, 3)
    v = (np.arange(n) + 0.5) / n
    h = (np.arange(n) + 0.5) / n - 0.5
    img = top[:, None, None] * (1 - v)[None, :, None] + bottom[:, None, None] * v[None, :, None]
    img = img + tilt[:, None, None] * h[None, None, :]
    return np.clip(img, 0.0, 1.0)


def gen_scene(spec, rng):
    """Render one scene: non-overlapping shapes over a smooth background, with a depth map.

    Placement uses rejection sampling; objects that cannot be placed without
    touching an earlier one are dropped, but the first always fits.
    """
    n = spec.size
    near, far = spec.depth_range
    img = _background(spec, rng)
    rows = (np.arange(n) + 0.5) / n
    depth = np.broadcast_to((far - (far - near) * rows)[:, None], (n, n)).copy()

    count = rng.integers(spec.count_range[0], spec.count_range[1] + 1)
    occupied = np.zeros((n, n), dtype=bool)
    boxes, masks = [], []
    for _ in range(count):
        for _attempt in range(50):
            kind = rng.integers(0, 3)
            s = rng.integers(spec.size_range[0], spec.size_range[1] + 1)
            x0 = rng.integers(0, n - s + 1)
            y0 = rng.integers(0, n - s + 1)
            mask = shape_mask(kind, x0, y0, s, n)
            if not mask.any():
                continue
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= grown[:, :-1]
            grown[:, :-1] |= grown[:, 1:]
            if (grown & occupied).any():
                continue
            break
        else:
            continue
        local = img[:, mask].mean(axis=1)
        for _c in range(20):
            color = rng.uniform(0.0, 1.0, 3)
            if np.abs(color - local).mean() >= spec.min_contrast:
                break
        img[:, mask] = color[:, None]
        depth[mask] = rng.uniform(near, far)
        occupied |= mask
        boxes.append((kind, *tight_box(mask)))
        masks.append(mask)
    clear = np.rint(img * 255.0) / 255.0
    return Scene(clear=clear, depth=depth[None], boxes=boxes, masks=masks)


def record_rng(seed, index):
    return Rng(splitmix64((int(seed) ^ int(index)) & ((1 << 64) - 1)))


def render_record(spec, fog, index, jitter=True):
    """Scene plus its hazy counterpart for global record ``index``.  Pure in (spec, fog, index)."""
    rng = record_rng(spec.seed, index)
    scene = gen_scene(spec, rng)
    beta = fog.beta * rng.uniform(0.5, 1.5) if jitter else fog.beta
    t = transmission_from_depth(scene.depth, beta)
    foggy = apply_fog(scene.clear, t, fog.airlight)
    return scene, foggy, beta


def gen_dataset(spec, n_train, n_val, n_test, fog, out_dir):
    """Write ``<out>/<split>/{clear,foggy,depth}/<id>.*`` plus ``<out>/<split>/manifest.json``.

    Returns a dict split -> DatasetManifest.  Record indices run globally across
    splits so a record's content does not depend on the other splits' sizes
    except through its position.
    """
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(c < 0 for c in counts.values()):
        raise ValueError(f"split sizes must be >= 0, got {counts}")
    out_dir = Path(out_dir)
    manifests = {}
    index = 0
    for split, count in counts.items():
        root = out_dir / split
        for sub in ("clear", "foggy", "depth"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(split=split, class_names=list(spec.classes), root=root)
        for k in range(count):
            rid = f"{split}_{k:05d}"
            scene, foggy, beta = render_record(spec, fog, index)
            index += 1
            write_ppm(root / "clear" / f"{rid}.ppm", float_to_u8(scene.clear))
            write_ppm(root / "foggy" / f"{rid}.ppm", float_to_u8(foggy))
            write_tensor(root / "depth" / f"{rid}.ptns", scene.depth)
            manifest.records.append(ManifestRecord(
                id=rid, clear_path=f"clear/{rid}.ppm", foggy_path=f"foggy/{rid}.ppm",
                depth_path=f"depth/{rid}.ptns", boxes=list(scene.boxes), beta=float(beta)))
        save_manifest(root / "manifest.json", manifest)
        log.info("wrote %d %s records to %s", count, split, root)
        manifests[split] = manifest
    return manifests


def load_pair(manifest, record):
    """(clear, foggy) float tensors for a manifest record."""
    clear = u8_to_float(read_ppm(manifest.resolve(record.clear_path)))
    foggy = u8_to_float(read_ppm(manifest.resolve(record.foggy_path)))
    return clear, foggy
