"""Single-anchor grid detector in light and heavy widths.

The raw output is a ``(5 + C, S, S)`` grid holding, per cell,
``(t_obj, t_x, t_y, t_w, t_h, class logits...)``.  A cell predicts a box
centred at ``((j + sigmoid(t_x)) * cell, (i + sigmoid(t_y)) * cell)`` of size
``(w0 * exp(t_w), h0 * exp(t_h))`` with score
``sigmoid(t_obj) * max softmax(logits)``.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .imageio import DetectionRecord, load_weights, read_detections, save_weights
from .metrics import iou
from .scatter import load_pair
from .tensorcore import Activation, Adam, Conv2d, Module, Sequential
from .tensorcore.layers import activation
from .tensorcore.losses import bce_with_logits, log_softmax
from .tensorcore.rng import Rng

log = logging.getLogger(__name__)

WIDTHS = {"light": 8, "heavy": 32}
STRIDE = 8          # three stride-2 convolutions
NUM_FIELDS = 5      # objectness + 4 box terms
NOOBJ_WEIGHT = 0.5
OBJ_PRIOR = -2.0    # initial objectness bias, sigmoid(-2) ~ 0.12


@dataclass
class GridDetectorConfig:
    width: str = "light"
    grid: int = 8
    num_classes: int = 3
    anchor: tuple = (16.0, 16.0)

    def __post_init__(self):
        if self.width not in WIDTHS:
            raise ValueError(f"width must be one of {sorted(WIDTHS)}, got {self.width!r}")
        if self.grid < 1 or self.num_classes < 1:
            raise ValueError("grid and num_classes must be >= 1")
        self.anchor = tuple(float(a) for a in self.anchor)
        if len(self.anchor) != 2 or min(self.anchor) <= 0:
            raise ValueError(f"anchor must be two positive sizes, got {self.anchor}")

    @property
    def base(self):
        return WIDTHS[self.width]

    @property
    def input_size(self):
        return self.grid * STRIDE

    @property
    def channels(self):
        return NUM_FIELDS + self.num_classes

    def to_json(self):
        return {"width": self.width, "grid": self.grid, "num_classes": self.num_classes,
                "anchor": list(self.anchor)}


class GridDetector(Module):
    """Stride-2 3x3 conv stack (3 -> b -> 2b -> 4b, plus a 4b block when heavy) and a 1x1 head."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        b = config.base
        layers = []
        for c_in, c_out in ((3, b), (b, 2 * b), (2 * b, 4 * b)):
            layers += [Conv2d(c_in, c_out, 3, rng, stride=2), Activation("relu")]
        if config.width == "heavy":
            layers += [Conv2d(4 * b, 4 * b, 3, rng), Activation("relu")]
        self.backbone = Sequential(*layers)
        self.head = Conv2d(4 * b, config.channels, 1, rng)
        self.head.params["bias"][0] = OBJ_PRIOR

    def forward(self, image):
        n = self.config.input_size
        if image.ndim not in (3, 4) or image.shape[-3:] != (3, n, n):
            raise ShapeError(f"detector expects (3, {n}, {n}) images, got {image.shape}",
                             dimension="input", expected=(3, n, n), actual=image.shape)
        return self.head.forward(self.backbone.forward(image))

    def backward(self, draw):
        return self.backbone.backward(self.head.backward(draw))


def num_params_formula(config):
    """Closed-form parameter count of a GridDetector."""
    b, k = config.base, 9
    total = (3 * k + 1) * b + (b * k + 1) * 2 * b + (2 * b * k + 1) * 4 * b
    if config.width == "heavy":
        total += (4 * b * k + 1) * 4 * b
    return total + (4 * b + 1) * config.channels


# --- encoding / decoding ------------------------------------------------------

@dataclass
class GridTargets:
    obj: np.ndarray     # (S, S) bool, responsible cells
    offset: np.ndarray  # (2, S, S) target sigmoid(t_x), sigmoid(t_y) in [0, 1)
    logsize: np.ndarray # (2, S, S) target t_w, t_h
    cls: np.ndarray     # (S, S) int class id, -1 where not responsible


def encode_targets(boxes, config):
    """Assign each GT ``(class_id, x, y, w, h)`` to the cell containing its centre.

    When several GT centres share a cell the larger-area box is kept (ties:
    the earlier box).  Centres outside the grid go to the nearest edge cell
    with the offset clamped to [0, 1], the closest centre a cell can decode.
    """
    s = config.grid
    cell = float(STRIDE)
    obj = np.zeros((s, s), dtype=bool)
    offset = np.zeros((2, s, s))
    logsize = np.zeros((2, s, s))
    cls = np.full((s, s), -1, dtype=np.int64)
    area = np.zeros((s, s))
    for c, x, y, w, h in boxes:
        if not (w > 0 and h > 0):
            raise ValueError(f"GT box must have positive size, got w={w} h={h}")
        if not 0 <= c < config.num_classes:
            raise ValueError(f"GT class {c} outside [0, {config.num_classes})")
        cx, cy = (x + w / 2.0) / cell, (y + h / 2.0) / cell
        j = min(max(int(math.floor(cx)), 0), s - 1)
        i = min(max(int(math.floor(cy)), 0), s - 1)
        if obj[i, j] and w * h <= area[i, j]:
            continue
        obj[i, j] = True
        area[i, j] = w * h
        offset[:, i, j] = (min(max(cx - j, 0.0), 1.0), min(max(cy - i, 0.0), 1.0))
        logsize[:, i, j] = (math.log(w / config.anchor[0]), math.log(h / config.anchor[1]))
        cls[i, j] = int(c)
    return GridTargets(obj=obj, offset=offset, logsize=logsize, cls=cls)


def _logit(p):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return np.log(p) - np.log1p(-p)


def encode_raw(boxes, config, confidence=30.0):
    """A RawGrid whose decoding reproduces ``boxes`` (one per responsible cell)."""
    t = encode_targets(boxes, config)
    raw = np.zeros((config.channels,) + t.obj.shape)
    raw[0] = np.where(t.obj, confidence, -confidence)
    raw[1:3] = _logit(t.offset)
    raw[3:5] = t.logsize
    for i, j in zip(*np.nonzero(t.obj)):
        raw[NUM_FIELDS + t.cls[i, j], i, j] = confidence
    return raw


def decode_grid(raw, config, conf_thresh=0.25, image_id=""):
    """Detections for every cell with score >= ``conf_thresh``, in raster order."""
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must lie in [0, 1], got {conf_thresh}")
    s = config.grid
    if raw.shape != (config.channels, s, s):
        raise ShapeError(f"raw grid must be {(config.channels, s, s)}, got {raw.shape}",
                         dimension="raw", expected=(config.channels, s, s), actual=raw.shape)
    cell = float(STRIDE)
    obj = activation(raw[0], "sigmoid")
    probs = np.exp(log_softmax(raw[NUM_FIELDS:], axis=0))
    cls = np.argmax(probs, axis=0)  # first maximum wins ties
    score = obj * probs.max(axis=0)
    sx = activation(raw[1], "sigmoid")
    sy = activation(raw[2], "sigmoid")
    out = []
    for i, j in zip(*np.nonzero(score >= conf_thresh)):
        w = config.anchor[0] * math.exp(raw[3, i, j])
        h = config.anchor[1] * math.exp(raw[4, i, j])
        cx = (j + sx[i, j]) * cell
        cy = (i + sy[i, j]) * cell
        out.append(DetectionRecord(image_id=image_id, class_id=int(cls[i, j]),
                                   score=float(min(max(score[i, j], 0.0), 1.0)),
                                   x=float(cx - w / 2.0), y=float(cy - h / 2.0), w=float(w), h=float(h)))
    return out


def nms(detections, iou_thresh=0.45):
    """Greedy same-class suppression by descending score.

    Ties in score go to the lower class id, then to insertion order.
    """
    order = sorted(range(len(detections)), key=lambda k: (-detections[k].score, detections[k].class_id, k))
    kept = []
    for k in order:
        d = detections[k]
        if all(q.class_id != d.class_id or iou(q.box, d.box) < iou_thresh for q in kept):
            kept.append(d)
    return kept


def detect(model, image, conf_thresh=0.25, nms_iou=0.45, image_id=""):
    raw = model.forward(np.asarray(image, dtype=np.float64))
    return nms(decode_grid(raw, model.config, conf_thresh, image_id), nms_iou)


# --- loss ---------------------------------------------------------------------

def _stack_targets(targets):
    if isinstance(targets, GridTargets):
        targets = [targets]
    return (np.stack([t.obj for t in targets]), np.stack([t.offset for t in targets]),
            np.stack([t.logsize for t in targets]), np.stack([t.cls for t in targets]))


def detector_loss(raw, targets, reduce=True):
    """Grid loss normalised per cell, averaged over the batch.

    Objectness BCE (no-object cells weighted 0.5), squared error on
    ``(sigmoid(t_x), sigmoid(t_y), t_w, t_h)`` and softmax cross-entropy on
    the class, both at responsible cells only.  ``raw`` is one grid or a
    batch; ``targets`` one GridTargets or a list.  With ``reduce=False`` the
    per-image losses are returned instead of ``(value, grad)``.
    """
    single = raw.ndim == 3
    raw = raw[None] if single else raw
    obj, offset, logsize, cls = _stack_targets(targets)
    n, _, s, _ = raw.shape
    if obj.shape != (n, s, s):
        raise ShapeError(f"targets {obj.shape} do not match raw grid {raw.shape}",
                         dimension="grid", expected=(n, s, s), actual=obj.shape)
    norm = s * s
    resp = obj.astype(raw.dtype)

    per_obj, g_obj = bce_with_logits(raw[:, 0], resp)
    weight = resp + NOOBJ_WEIGHT * (1.0 - resp)
    total = (weight * per_obj).sum(axis=(1, 2))
    grad = np.zeros_like(raw)
    grad[:, 0] = weight * g_obj

    sig = activation(raw[:, 1:3], "sigmoid")
    d_off = (sig - offset) * resp[:, None]
    d_size = (raw[:, 3:5] - logsize) * resp[:, None]
    total = total + (d_off ** 2).sum(axis=(1, 2, 3)) + (d_size ** 2).sum(axis=(1, 2, 3))
    grad[:, 1:3] = 2.0 * d_off * sig * (1.0 - sig)
    grad[:, 3:5] = 2.0 * d_size

    lsm = log_softmax(raw[:, NUM_FIELDS:], axis=1)
    onehot = np.zeros_like(lsm)
    bi, ii, jj = np.nonzero(obj)
    onehot[bi, cls[bi, ii, jj], ii, jj] = 1.0
    total = total - (onehot * lsm).sum(axis=(1, 2, 3))
    grad[:, NUM_FIELDS:] = (np.exp(lsm) * resp[:, None] - onehot)

    per_image = total / norm
    if not reduce:
        return per_image
    grad = grad / (norm * n)
    return float(per_image.mean()), (grad[0] if single else grad)


class DetectorLossProbe:
    """Adapter that lets ``grad_check`` differentiate model + detector loss."""

    def __init__(self, targets):
        self.targets = targets

    def __call__(self, raw):
        return detector_loss(raw, self.targets)

    def batch(self, raws):
        return detector_loss(raws, [self.targets] * len(raws), reduce=False)


# --- training -----------------------------------------------------------------

@dataclass
class DetectorTrainParams:
    lr: float = 2e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0


def _load_split(manifest, condition):
    if condition not in ("clear", "foggy"):
        raise ValueError(f"condition must be 'clear' or 'foggy', got {condition!r}")
    images = []
    for rec in manifest.records:
        clear, foggy = load_pair(manifest, rec)
        images.append(clear if condition == "clear" else foggy)
    return np.stack(images)


def train_detector(config, manifest, condition="clear", params=None, rng=None):
    """Adam on the grid loss over the chosen condition's images.

    Returns ``(model, loss_log)`` with one ``(epoch, mean batch loss)`` per
    epoch.  Everything random flows from ``params.seed``.
    """
    params = params or DetectorTrainParams()
    if not manifest.records:
        raise ValueError(f"cannot train a detector on the empty {manifest.split!r} split")
    rng = rng or Rng(params.seed)
    model = GridDetector(config, rng.child(0))
    images = _load_split(manifest, condition)
    targets = [encode_targets(r.boxes, config) for r in manifest.records]
    opt = Adam(lr=params.lr)
    shuffle_rng = rng.child(1)
    log_rows = []
    order = list(range(len(images)))
    for epoch in range(1, params.epochs + 1):
        shuffle_rng.shuffle(order)
        losses = []
        for start in range(0, len(order), params.batch_size):
            idx = order[start:start + params.batch_size]
            raw = model.forward(images[idx])
            value, grad = detector_loss(raw, [targets[k] for k in idx])
            model.backward(grad)
            opt.step(model.named_params(), model.named_grads())
            losses.append(value)
        log_rows.append((epoch, float(np.mean(losses))))
        log.info("detector %s epoch %d loss %.5f", config.width, epoch, log_rows[-1][1])
    return model, log_rows


# --- external detections ------------------------------------------------------

def ingest_external(path, image_ids=()):
    """Detections from a JSONL file grouped by image, each list score-sorted (stable).

    Every id in ``image_ids`` is present in the result, with an empty list when
    the file has no detections for it.
    """
    grouped = defaultdict(list)
    for rec in read_detections(path):
        grouped[rec.image_id].append(rec)
    out = {i: [] for i in image_ids}
    for image_id, recs in grouped.items():
        out[image_id] = sorted(recs, key=lambda r: -r.score)
    return out


# --- persistence --------------------------------------------------------------

def save_detector(model, path):
    save_weights(path, model.state_dict())


def load_detector(path, grid=8, num_classes=3, anchor=(16.0, 16.0)):
    """Rebuild a detector from its archive; the width is read off the tensor shapes."""
    state = load_weights(path)
    first = state.get("backbone.0.weight")
    if first is None:
        raise ValueError(f"{path}: not a grid detector archive (no backbone.0.weight)")
    widths = {b: w for w, b in WIDTHS.items()}
    width = widths.get(first.shape[0])
    if width is None:
        raise ValueError(f"{path}: unknown detector base width {first.shape[0]}")
    model = GridDetector(GridDetectorConfig(width=width, grid=grid, num_classes=num_classes,
                                            anchor=anchor), Rng(0))
    model.load_state_dict(state)
    return model
