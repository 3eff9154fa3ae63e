"""Training, evaluation and weight persistence for the dehazers."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ..imageio import load_weights, save_weights
from ..metrics import psnr, ssim
from ..scatter import load_pair
from ..tensorcore import Adam
from ..tensorcore.losses import mse
from ..tensorcore.rng import Rng
from .models import AODNetX, IdentityDehazer, build_model

log = logging.getLogger(__name__)


def roi_mask(detections, h, w):
    """(1, H, W) field: max score of the boxes covering each pixel centre, 0 elsewhere.

    Pixel (r, c) is covered by box (x, y, bw, bh) when its centre lies in
    ``[x, x + bw) x [y, y + bh)``; boxes past the border are clipped.
    """
    mask = np.zeros((1, h, w))
    for d in detections:
        c0 = max(int(np.ceil(d.x - 0.5)), 0)
        c1 = min(int(np.ceil(d.x + d.w - 0.5)), w)
        r0 = max(int(np.ceil(d.y - 0.5)), 0)
        r1 = min(int(np.ceil(d.y + d.h - 0.5)), h)
        if c1 > c0 and r1 > r0:
            region = mask[0, r0:r1, c0:c1]
            np.maximum(region, d.score, out=region)
    return mask


class _Box:
    """Minimal detection stand-in for ground-truth boxes (score 1)."""

    __slots__ = ("x", "y", "w", "h", "score")

    def __init__(self, x, y, w, h, score=1.0):
        self.x, self.y, self.w, self.h, self.score = x, y, w, h, score


def gt_mask(boxes, h, w):
    return roi_mask([_Box(x, y, bw, bh) for _, x, y, bw, bh in boxes], h, w)


@dataclass
class DehazeTrainParams:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    use_gt_rois: bool = True


def load_corpus(manifest):
    """Stacked (foggy, clear, gt masks) arrays for every record, in manifest order."""
    foggy, clear, masks = [], [], []
    for rec in manifest.records:
        c, f = load_pair(manifest, rec)
        clear.append(c)
        foggy.append(f)
        masks.append(gt_mask(rec.boxes, *c.shape[1:]))
    return np.stack(foggy), np.stack(clear), np.stack(masks)


def _forward(model, images, masks):
    if isinstance(model, AODNetX):
        return model.forward(images, masks)
    return model.forward(images)


def train_dehazer(kind, manifest, params=None):
    """Minimise MSE(J, clear) with Adam over shuffled mini-batches.

    AOD-NetX sees ground-truth RoI masks (score 1) when ``use_gt_rois``, else
    all-zero masks.  Returns ``(model, loss_log)`` where ``loss_log`` holds
    ``(epoch, mean batch loss)`` rows.
    """
    params = params or DehazeTrainParams()
    if not manifest.records:
        raise ValueError(f"cannot train a dehazer on the empty {manifest.split!r} split")
    rng = Rng(params.seed)
    model = build_model(kind, rng.child(0))
    shuffle_rng = rng.child(1)
    foggy, clear, masks = load_corpus(manifest)
    if not params.use_gt_rois:
        masks = np.zeros_like(masks)
    opt = Adam(lr=params.lr)
    model.train()
    order = list(range(len(foggy)))
    rows = []
    for epoch in range(1, params.epochs + 1):
        shuffle_rng.shuffle(order)
        losses = []
        for start in range(0, len(order), params.batch_size):
            idx = order[start:start + params.batch_size]
            j = _forward(model, foggy[idx], masks[idx])
            value, grad = mse(j, clear[idx])
            model.backward(grad)
            opt.step(model.named_params(), model.named_grads())
            losses.append(value)
        rows.append((epoch, float(np.mean(losses))))
        log.info("%s epoch %d loss %.6f", kind, epoch, rows[-1][1])
    model.eval()
    return model, rows


def dehaze_image(model, image, mask=None):
    """Clamped restoration of one (3, H, W) image."""
    if isinstance(model, AODNetX):
        return model.dehaze(image, mask)["J"]
    return model.dehaze(image)["J"]


def eval_dehazer(model, manifest, use_gt_rois=True):
    """Mean SSIM / PSNR / MSE-loss of dehazed foggy images against clear, in record order.

    ``model=None`` evaluates the raw hazy images (identity baseline).
    """
    if not manifest.records:
        raise ValueError(f"cannot evaluate on the empty {manifest.split!r} split")
    model = model or IdentityDehazer()
    scores, psnrs, losses = [], [], []
    for rec in manifest.records:
        clear, foggy = load_pair(manifest, rec)
        mask = gt_mask(rec.boxes, *clear.shape[1:]) if use_gt_rois else np.zeros((1,) + clear.shape[1:])
        j = dehaze_image(model, foggy, mask)
        scores.append(ssim(j, clear))
        psnrs.append(psnr(j, clear))
        losses.append(mse(j, clear)[0])
    return {"ssim": float(np.mean(scores)), "psnr": float(np.mean(psnrs)),
            "loss": float(np.mean(losses)), "n": len(scores)}


def table1_rows(results):
    """Rows ``(model, average loss, SSIM)`` in the order given; ``results`` maps name -> eval dict."""
    return [(name, r["loss"], r["ssim"]) for name, r in results.items()]


def format_table1(rows):
    lines = ["| Model | Average Loss | SSIM |", "|---|---|---|"]
    lines += [f"| {name} | {loss:.4f} | {s:.4f} |" for name, loss, s in rows]
    return "\n".join(lines) + "\n"


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, value in rows:
            w.writerow([epoch, repr(float(value))])


def save_model(model, path):
    save_weights(path, model.state_dict())


def load_model(kind, path):
    """Rebuild a dehazer of ``kind`` and fill it from a weight archive."""
    model = build_model(kind, Rng(0))
    model.load_state_dict(load_weights(path))
    return model.eval()
