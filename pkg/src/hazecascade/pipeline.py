"""Detector-only, dehaze-then-detect and light -> AOD-NetX -> heavy cascades, and the
clear-vs-foggy benchmark table.
"""

import copy
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dehaze.models import AODNet, AODNetX
from .dehaze.train import roi_mask
from .detect import detect
from .errors import ConfigError
from .imageio import float_to_u8, write_detections, write_ppm
from .metrics import mean_average_precision
from .scatter import load_pair

log = logging.getLogger(__name__)

HEAVY_ONLY = "HeavyOnly"
AOD_THEN_HEAVY = "AODNetThenHeavy"
CASCADE = "LightAODNetXHeavy"
VARIANT_KINDS = (HEAVY_ONLY, AOD_THEN_HEAVY, CASCADE)
CONDITIONS = ("clear", "foggy")


@dataclass
class DetectorFamily:
    name: str
    heavy: object
    light: object = None


@dataclass
class VariantSpec:
    kind: str
    family: DetectorFamily
    dehazer: object = None
    conf_thresh: float = 0.25   # preliminary detections feeding the RoI mask
    det_thresh: float = 0.05    # final detections kept for ranking
    nms_iou: float = 0.45

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant {self.kind!r}; choose from {list(VARIANT_KINDS)}")
        if self.family.heavy is None:
            raise ConfigError(f"variant {self.kind} of family {self.family.name!r} needs heavy detector weights")
        if self.kind == AOD_THEN_HEAVY and not isinstance(self.dehazer, AODNet):
            raise ConfigError(f"{self.kind} needs AOD-Net weights")
        if self.kind == CASCADE:
            if self.family.light is None:
                raise ConfigError(f"{self.kind} of family {self.family.name!r} needs light detector weights")
            if not isinstance(self.dehazer, AODNetX):
                raise ConfigError(f"{self.kind} needs AOD-NetX weights")

    @property
    def name(self):
        heavy = f"{self.family.name}-heavy"
        if self.kind == HEAVY_ONLY:
            return heavy
        if self.kind == AOD_THEN_HEAVY:
            return f"AOD-Net+{heavy}"
        return f"{self.family.name}-light+AOD-NetX+{heavy}"


@dataclass
class VariantOutput:
    detections: list
    dehazed: np.ndarray = None
    preliminary: list = field(default_factory=list)


def run_variant(variant, image, image_id=""):
    """Final detections for one image; see the module docstring for the three flows."""
    image = np.asarray(image, dtype=np.float64)
    final = lambda x: detect(variant.family.heavy, x, variant.det_thresh, variant.nms_iou, image_id)
    if variant.kind == HEAVY_ONLY:
        return VariantOutput(detections=final(image))
    if variant.kind == AOD_THEN_HEAVY:
        j = variant.dehazer.dehaze(image)["J"]
        return VariantOutput(detections=final(j), dehazed=j)
    prelim = detect(variant.family.light, image, variant.conf_thresh, variant.nms_iou, image_id)
    mask = roi_mask(prelim, *image.shape[1:])
    j = variant.dehazer.dehaze(image, mask)["J"]
    return VariantOutput(detections=final(j), dehazed=j, preliminary=prelim)


def performance_change(map_clear, map_foggy):
    """``100 * (foggy - clear) / clear``; NaN when the clear mAP is 0."""
    if map_clear == 0:
        return math.nan
    return 100.0 * (map_foggy - map_clear) / map_clear


@dataclass
class BenchmarkRow:
    variant: str
    map_clear: float
    map_foggy: float

    @property
    def change_percent(self):
        return performance_change(self.map_clear, self.map_foggy)


def _run_images(variant, items, threads):
    """Run ``variant`` over ``[(image_id, image)]`` keeping input order.

    Workers get private deep copies of the models because layers cache
    activations on the instance; each image is processed alone, so results do
    not depend on the thread count.
    """
    if threads <= 1 or len(items) < 2:
        return [run_variant(variant, img, iid) for iid, img in items]
    shards = [items[k::threads] for k in range(threads)]
    copies = [copy.deepcopy(variant) for _ in shards]

    def work(job):
        shard, v = job
        return [run_variant(v, img, iid) for iid, img in shard]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, zip(shards, copies)))
    out = [None] * len(items)
    for k, part in enumerate(parts):
        out[k::threads] = part
    return out


def run_benchmark(manifest, variants, conditions=CONDITIONS, iou_thresh=0.5, threads=1):
    """Evaluate every variant on every condition of ``manifest``.

    Returns ``(rows, outputs)`` where ``outputs[(variant name, condition)]`` is
    the per-record list of VariantOutput in manifest order.
    """
    if not manifest.records:
        raise ValueError(f"cannot benchmark the empty {manifest.split!r} split")
    if not variants:
        raise ValueError("at least one variant is required")
    pairs = [load_pair(manifest, r) for r in manifest.records]
    gts = {r.id: r.boxes for r in manifest.records}
    classes = range(len(manifest.class_names))
    outputs, rows = {}, []
    for v in variants:
        maps = {}
        for cond in conditions:
            items = [(r.id, p[0] if cond == "clear" else p[1]) for r, p in zip(manifest.records, pairs)]
            res = _run_images(v, items, threads)
            outputs[(v.name, cond)] = res
            dets = [d for o in res for d in o.detections]
            maps[cond], _ = mean_average_precision(dets, gts, classes, iou_thresh)
            log.info("%s on %s: mAP %.4f", v.name, cond, maps[cond])
        rows.append(BenchmarkRow(v.name, maps.get("clear", math.nan), maps.get("foggy", math.nan)))
    return rows, outputs


def _fmt(x):
    return repr(float(x))


def write_benchmark_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "map_clear", "map_foggy", "change_percent"])
        for r in rows:
            w.writerow([r.variant, _fmt(r.map_clear), _fmt(r.map_foggy), _fmt(r.change_percent)])


def read_benchmark_csv(path):
    with open(path, newline="") as fh:
        return [BenchmarkRow(rec["variant"], float(rec["map_clear"]), float(rec["map_foggy"]))
                for rec in csv.DictReader(fh)]


def format_markdown(rows):
    lines = ["| Model | mAP (Clear) | mAP (Foggy) | Performance Change |", "|---|---|---|---|"]
    for r in rows:
        ch = r.change_percent
        change = "n/a" if math.isnan(ch) else f"{ch:+.2f}%"
        lines.append(f"| {r.variant} | {r.map_clear:.4f} | {r.map_foggy:.4f} | {change} |")
    return "\n".join(lines) + "\n"


def _safe(name):
    return name.replace("+", "_").replace("/", "_")


def compare_report(rows, out_dir, outputs=None, manifest=None, n_pairs=4):
    """Write benchmark.csv, benchmark.md, detection dumps and hazy/dehazed image pairs.

    Returns the list of written paths.
    """
    if not rows:
        raise ValueError("no benchmark rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "benchmark.csv", out_dir / "benchmark.md"]
    write_benchmark_csv(written[0], rows)
    written[1].write_text(format_markdown(rows))
    if outputs is None:
        return written
    det_dir = out_dir / "detections"
    det_dir.mkdir(exist_ok=True)
    for (name, cond), res in outputs.items():
        path = det_dir / f"{_safe(name)}__{cond}.jsonl"
        write_detections(path, [d for o in res for d in o.detections])
        written.append(path)
    if manifest is None or n_pairs <= 0:
        return written
    for (name, cond), res in outputs.items():
        if cond != "foggy" or res[0].dehazed is None:
            continue
        pair_dir = out_dir / "pairs" / _safe(name)
        pair_dir.mkdir(parents=True, exist_ok=True)
        for rec, o in zip(manifest.records[:n_pairs], res):
            _, foggy = load_pair(manifest, rec)
            for tag, img in (("hazy", foggy), ("dehazed", o.dehazed)):
                path = pair_dir / f"{rec.id}_{tag}.ppm"
                write_ppm(path, float_to_u8(img))
                written.append(path)
    return written
