"""Command-line entry point: ``hazecascade <subcommand> [--config run.json] [--seed N] [--out DIR]``.

Output tree under ``--out`` (default: the config's ``out``)::

    data/<split>/...             synthesised corpus
    weights/<kind>.ppwa          dehazers
    weights/det_<family>_<width>.ppwa
    logs/<name>_loss.csv         per-epoch training loss
    tables/                      table1.md, dehaze_eval.{csv,md}
    detections/                  JSONL from `detect` and `pipeline`
    benchmark/                   benchmark.{csv,md}, detection dumps, image pairs
"""

import argparse
import csv
import json
import logging
import math
import sys
import zlib
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .dehaze.models import MODEL_KINDS
from .dehaze.train import (DehazeTrainParams, eval_dehazer, format_table1, load_model, save_model,
                           table1_rows, train_dehazer, write_loss_log)
from .detect import (DetectorTrainParams, GridDetectorConfig, detect, ingest_external, load_detector,
                     save_detector, train_detector)
from .errors import ConfigError, HazeError
from .imageio import DatasetManifest, load_manifest, write_detections
from .metrics import mean_average_precision
from .pipeline import (VARIANT_KINDS, DetectorFamily, VariantSpec, compare_report, format_markdown,
                       run_benchmark, run_variant)
from .scatter import FogParams, SceneSpec, gen_dataset, load_pair
from .tensorcore.rng import splitmix64

log = logging.getLogger("hazecascade")


class UsageError(Exception):
    pass


# --- context ------------------------------------------------------------------

class Context:
    def __init__(self, args):
        cfg = load_config(args.config) if args.config else RunConfig(base_dir=Path.cwd())
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            cfg.threads = args.threads
        self.cfg = cfg
        self.out = Path(args.out) if args.out else cfg.out_dir
        self.args = args

    @property
    def data_dir(self):
        return self.out / "data"

    @property
    def weights_dir(self):
        return self.out / "weights"

    def subdir(self, name):
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest(self, split=None):
        override = getattr(self.args, "manifest", None)
        if override:
            return load_manifest(override)
        split = split or getattr(self.args, "split", None) or self.cfg.pipeline.split
        path = self.data_dir / split / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest for split {split!r} at {path}; run `synth` first")
        return load_manifest(path)

    def seed_for(self, tag):
        return splitmix64((self.cfg.seed ^ zlib.crc32(tag.encode())) & ((1 << 64) - 1))

    def detector_config(self, width):
        d = self.cfg.detect
        return GridDetectorConfig(width=width, grid=d.grid, anchor=d.anchor,
                                  num_classes=len(SceneSpec().classes))

    def detector_path(self, family, width):
        return self.weights_dir / f"det_{family}_{width}.ppwa"

    def load_detector(self, family, width):
        path = self.detector_path(family, width)
        if not path.exists():
            raise FileNotFoundError(f"missing detector weights {path}; run `train-detect` first")
        d = self.cfg.detect
        return load_detector(path, grid=d.grid, anchor=d.anchor)

    def load_dehazer(self, kind):
        path = self.weights_dir / f"{kind}.ppwa"
        if not path.exists():
            raise FileNotFoundError(f"missing dehazer weights {path}; run `train-dehaze` first")
        return load_model(kind, path)


def _truncate(manifest, n):
    if n <= 0 or n >= len(manifest.records):
        return manifest
    return DatasetManifest(split=manifest.split, class_names=manifest.class_names,
                           records=manifest.records[:n], root=manifest.root)


def _variant(ctx, kind, family, cache):
    def get(key, loader):
        if key not in cache:
            cache[key] = loader()
        return cache[key]

    fam = DetectorFamily(name=family, heavy=get(("det", family, "heavy"),
                                                 lambda: ctx.load_detector(family, "heavy")))
    dehazer = None
    if kind == "AODNetThenHeavy":
        dehazer = get("aodnet", lambda: ctx.load_dehazer("aodnet"))
    elif kind == "LightAODNetXHeavy":
        fam.light = get(("det", family, "light"), lambda: ctx.load_detector(family, "light"))
        dehazer = get("aodnetx", lambda: ctx.load_dehazer("aodnetx"))
    p = ctx.cfg.pipeline
    return VariantSpec(kind=kind, family=fam, dehazer=dehazer, conf_thresh=p.conf_thresh,
                       det_thresh=p.det_thresh, nms_iou=p.nms_iou)


def _num(x):
    return "inf" if math.isinf(x) else f"{x:.4f}"


# --- subcommands --------------------------------------------------------------

def cmd_synth(ctx):
    d, f = ctx.cfg.dataset, ctx.cfg.fog
    spec = SceneSpec(seed=ctx.cfg.seed, size=d.size, count_range=d.count_range, size_range=d.size_range,
                     depth_range=d.depth_range, background_tilt=d.background_tilt,
                     min_contrast=d.min_contrast)
    manifests = gen_dataset(spec, d.n_train, d.n_val, d.n_test, FogParams(f.beta, f.airlight), ctx.data_dir)
    for split, m in manifests.items():
        print(f"{split}: {len(m.records)} records -> {ctx.data_dir / split}")
    return 0


def cmd_train_dehaze(ctx):
    c = ctx.cfg.dehaze
    kinds = ctx.args.kind or list(c.kinds)
    for k in kinds:
        if k not in MODEL_KINDS:
            raise ConfigError(f"unknown dehazer kind {k!r}; choose from {sorted(MODEL_KINDS)}")
    train = _truncate(ctx.manifest("train"), c.max_train)
    val = ctx.manifest("val")
    wdir, ldir = ctx.subdir("weights"), ctx.subdir("logs")
    results = {}
    for kind in kinds:
        params = DehazeTrainParams(lr=c.lr, epochs=c.epochs, batch_size=c.batch_size,
                                   seed=ctx.cfg.seed, use_gt_rois=c.use_gt_rois)
        model, rows = train_dehazer(kind, train, params)
        save_model(model, wdir / f"{kind}.ppwa")
        write_loss_log(ldir / f"{kind}_loss.csv", rows)
        results[kind] = eval_dehazer(model, val, use_gt_rois=c.use_gt_rois)
    table = format_table1(table1_rows(results))
    (ctx.subdir("tables") / "table1.md").write_text(table)
    print(table, end="")
    return 0


def cmd_train_detect(ctx):
    d = ctx.cfg.detect
    train = ctx.manifest("train")
    wdir, ldir = ctx.subdir("weights"), ctx.subdir("logs")
    families = [ctx.args.family] if ctx.args.family else list(d.families)
    widths = [ctx.args.width] if ctx.args.width else ["light", "heavy"]
    for family in families:
        for width in widths:
            lr, epochs = (d.light_lr, d.light_epochs) if width == "light" else (d.heavy_lr, d.heavy_epochs)
            params = DetectorTrainParams(lr=lr, epochs=epochs, batch_size=d.batch_size,
                                         seed=ctx.seed_for(f"detector/{family}/{width}"))
            model, rows = train_detector(ctx.detector_config(width), train, d.condition, params)
            save_detector(model, ctx.detector_path(family, width))
            write_loss_log(ldir / f"det_{family}_{width}_loss.csv", rows)
            print(f"detector {family}/{width}: {model.num_params()} params, final loss {rows[-1][1]:.5f}")
    return 0


def cmd_eval_dehaze(ctx):
    manifest = ctx.manifest()
    use_gt = ctx.cfg.dehaze.use_gt_rois
    results = {"hazy input": eval_dehazer(None, manifest)}
    kinds = ctx.args.kind or [k for k in MODEL_KINDS if (ctx.weights_dir / f"{k}.ppwa").exists()]
    for kind in kinds:
        results[kind] = eval_dehazer(ctx.load_dehazer(kind), manifest, use_gt_rois=use_gt)
    tdir = ctx.subdir("tables")
    with open(tdir / "dehaze_eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "ssim", "psnr", "loss"])
        for name, r in results.items():
            w.writerow([name, repr(r["ssim"]), "inf" if math.isinf(r["psnr"]) else repr(r["psnr"]), repr(r["loss"])])
    lines = ["| Model | SSIM | PSNR (dB) |", "|---|---|---|"]
    lines += [f"| {name} | {_num(r['ssim'])} | {_num(r['psnr'])} |" for name, r in results.items()]
    (tdir / "dehaze_eval.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_detect(ctx):
    manifest = ctx.manifest()
    family = ctx.args.family or ctx.cfg.detect.families[0]
    model = ctx.load_detector(family, ctx.args.width)
    p = ctx.cfg.pipeline
    dets = []
    for rec in manifest.records:
        clear, foggy = load_pair(manifest, rec)
        img = clear if ctx.args.condition == "clear" else foggy
        dets += detect(model, img, p.det_thresh, p.nms_iou, rec.id)
    out = Path(ctx.args.output) if ctx.args.output else (
        ctx.subdir("detections") / f"{family}_{ctx.args.width}_{manifest.split}_{ctx.args.condition}.jsonl")
    write_detections(out, dets)
    gts = {r.id: r.boxes for r in manifest.records}
    value, _ = mean_average_precision(dets, gts, range(len(manifest.class_names)), p.iou_thresh)
    print(f"{len(dets)} detections -> {out}; mAP@{p.iou_thresh} = {value:.4f}")
    return 0


def cmd_pipeline(ctx):
    manifest = ctx.manifest()
    family = ctx.args.family or ctx.cfg.detect.families[0]
    variant = _variant(ctx, ctx.args.variant, family, {})
    dets = []
    for rec in manifest.records:
        clear, foggy = load_pair(manifest, rec)
        img = clear if ctx.args.condition == "clear" else foggy
        dets += run_variant(variant, img, rec.id).detections
    out = Path(ctx.args.output) if ctx.args.output else (
        ctx.subdir("detections") / f"{variant.name.replace('+', '_')}_{manifest.split}_{ctx.args.condition}.jsonl")
    write_detections(out, dets)
    gts = {r.id: r.boxes for r in manifest.records}
    value, _ = mean_average_precision(dets, gts, range(len(manifest.class_names)), ctx.cfg.pipeline.iou_thresh)
    print(f"{variant.name}: {len(dets)} detections -> {out}; mAP@{ctx.cfg.pipeline.iou_thresh} = {value:.4f}")
    return 0


def cmd_benchmark(ctx):
    p = ctx.cfg.pipeline
    for kind in p.variants:
        if kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant {kind!r}; choose from {list(VARIANT_KINDS)}")
    manifest = ctx.manifest()
    cache = {}
    variants = [_variant(ctx, kind, fam, cache) for fam in ctx.cfg.detect.families for kind in p.variants]
    rows, outputs = run_benchmark(manifest, variants, iou_thresh=p.iou_thresh, threads=ctx.cfg.threads)
    out_dir = ctx.subdir("benchmark")
    compare_report(rows, out_dir, outputs, manifest, p.n_pairs)
    print(format_markdown(rows), end="")
    for r in rows:
        ch = r.change_percent
        sign = "n/a" if math.isnan(ch) else ("gain" if ch > 0 else "drop" if ch < 0 else "flat")
        print(f"{r.variant}: foggy vs clear {sign}")
    return 0


def cmd_gradcheck(ctx):
    from .gradsuite import run_suite

    results = run_suite(seed=ctx.cfg.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ingest(ctx):
    ids = ()
    if ctx.args.split or ctx.args.manifest:
        ids = [r.id for r in ctx.manifest().records]
    grouped = ingest_external(ctx.args.path, ids)
    n = sum(len(v) for v in grouped.values())
    print(json.dumps({"images": len(grouped), "detections": n,
                      "per_image": {k: len(v) for k, v in sorted(grouped.items())}}, sort_keys=True))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-dehaze": cmd_train_dehaze,
    "train-detect": cmd_train_detect,
    "eval-dehaze": cmd_eval_dehaze,
    "detect": cmd_detect,
    "pipeline": cmd_pipeline,
    "benchmark": cmd_benchmark,
    "gradcheck": cmd_gradcheck,
    "ingest": cmd_ingest,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--threads", type=int, help="worker threads for per-image stages")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress lines to stderr")

    parser = argparse.ArgumentParser(prog="hazecascade", description="Selective-region dehazing cascade toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    sub.add_parser("synth", parents=[common], help="generate the synthetic clear/foggy corpus")
    p = sub.add_parser("train-dehaze", parents=[common], help="train dehazers and print the loss/SSIM table")
    p.add_argument("--kind", action="append", choices=sorted(MODEL_KINDS), help="dehazer kind (repeatable)")
    p = sub.add_parser("train-detect", parents=[common], help="train light and heavy detectors")
    p.add_argument("--family")
    p.add_argument("--width", choices=["light", "heavy"])
    p = sub.add_parser("eval-dehaze", parents=[common], help="SSIM/PSNR of trained dehazers")
    p.add_argument("--kind", action="append", choices=sorted(MODEL_KINDS))
    p.add_argument("--split")
    p.add_argument("--manifest", help="evaluate an external manifest instead of a split")
    p = sub.add_parser("detect", parents=[common], help="run one detector over a split, write JSONL")
    p.add_argument("--family")
    p.add_argument("--width", choices=["light", "heavy"], default="heavy")
    p.add_argument("--split")
    p.add_argument("--manifest")
    p.add_argument("--condition", choices=["clear", "foggy"], default="foggy")
    p.add_argument("--output")
    p = sub.add_parser("pipeline", parents=[common], help="run one variant over a split, write JSONL")
    p.add_argument("--variant", choices=list(VARIANT_KINDS), default="LightAODNetXHeavy")
    p.add_argument("--family")
    p.add_argument("--split")
    p.add_argument("--manifest")
    p.add_argument("--condition", choices=["clear", "foggy"], default="foggy")
    p.add_argument("--output")
    p = sub.add_parser("benchmark", parents=[common], help="clear-vs-foggy mAP table for every variant")
    p.add_argument("--split")
    p.add_argument("--manifest", help="benchmark an external (e.g. out-of-distribution) manifest")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference suite over layers and models")
    p = sub.add_parser("ingest", parents=[common], help="validate an external detection JSONL file")
    p.add_argument("path")
    p.add_argument("--split", help="list every image of this split, including those without detections")
    p.add_argument("--manifest")
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    except (HazeError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
