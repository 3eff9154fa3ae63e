"""Finite-difference suite over every layer and every full network.

Each probe draws a random 8x8 input (3 channels unless the layer needs
otherwise), jitters all parameters by U(-0.1, 0.1) so zero-initialised biases
do not park activations exactly on a kink, and redraws until the smallest
distance to a non-differentiable point is at least ``KINK_MARGIN``.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from .dehaze.models import AODNet, AODNetX, DehazeNet, DehazeUNet, estimate_airlight
from .detect import DetectorLossProbe, GridDetector, GridDetectorConfig, encode_targets
from .tensorcore import (Activation, BatchNorm, BilinearUp, Conv2d, Linear, MaxPool2, MaxPoolSame, Maxout,
                         Module, Rng, concat, concat_backward, grad_check)
from .tensorcore.gradcheck import MSELoss, kink_margin

log = logging.getLogger(__name__)

SMOOTH_TOL = 1e-6
PIECEWISE_TOL = 1e-5
KINK_MARGIN = 1e-3
MODEL_KINK_MARGIN = 1e-4   # deep nets rarely clear 1e-3 everywhere; eps is 1e-5
REFINE_ABOVE = 1e-6
MAX_DRAWS = 50


@dataclass
class ProbeResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float
    n_checked: int
    n_refined: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


class _Concat(Module):
    """Two-input concatenation exposed as a single-input module (split then concat)."""

    def __init__(self, rng):
        super().__init__()
        self.conv = Conv2d(3, 2, 1, rng)

    def forward(self, x):
        out, self._split = concat([x, self.conv.forward(x)])
        return out

    def backward(self, dout):
        dx, dy = concat_backward(dout, self._split)
        return dx + self.conv.backward(dy)


def _jitter(model, rng):
    for p in model.named_params().values():
        p += rng.uniform(-0.1, 0.1, p.shape)


def _layer_probes():
    """(name, factory(rng) -> (module, input), tolerance) for single layers."""
    def x3(rng, c=3):
        return rng.uniform(-1.0, 1.0, (c, 8, 8))

    return [
        ("conv2d 3x3", lambda r: (Conv2d(3, 3, 3, r), x3(r)), SMOOTH_TOL),
        ("conv2d 5x5 stride 2", lambda r: (Conv2d(2, 3, 5, r, stride=2), x3(r, 2)), SMOOTH_TOL),
        ("relu", lambda r: (Activation("relu"), x3(r)), SMOOTH_TOL),
        ("sigmoid", lambda r: (Activation("sigmoid"), x3(r)), SMOOTH_TOL),
        ("brelu", lambda r: (Activation("brelu"), x3(r)), SMOOTH_TOL),
        ("maxout", lambda r: (Maxout(4), x3(r, 8)), SMOOTH_TOL),
        ("maxpool_same 7", lambda r: (MaxPoolSame(7), x3(r)), SMOOTH_TOL),
        ("maxpool2", lambda r: (MaxPool2(), x3(r)), SMOOTH_TOL),
        ("bilinear_up", lambda r: (BilinearUp(), x3(r)), SMOOTH_TOL),
        ("concat", lambda r: (_Concat(r), x3(r)), SMOOTH_TOL),
        ("batchnorm (train, fixed stats)", lambda r: (BatchNorm(3).train(), x3(r)), PIECEWISE_TOL),
        ("linear", lambda r: (Linear(6, 4, r), r.uniform(-1.0, 1.0, (6,))), SMOOTH_TOL),
    ]


def _model_probes():
    def aodnet(r):
        return AODNet(r), r.uniform(0, 1, (3, 8, 8)), None

    def aodnetx(r):
        m = AODNetX(r)
        mask = np.zeros((1, 8, 8))
        mask[0, 2:6, 1:5] = r.uniform(0.3, 1.0)
        m.mask = mask
        return m, r.uniform(0, 1, (3, 8, 8)), None

    def unet(r):
        return DehazeUNet(r).train(), r.uniform(0, 1, (3, 8, 8)), None

    def dehazenet(r):
        m = DehazeNet(r)
        x = r.uniform(0, 1, (3, 8, 8))
        m.airlight = estimate_airlight(x)  # held fixed; the ranking is piecewise constant
        return m, x, None

    def detector(width):
        def make(r):
            cfg = GridDetectorConfig(width=width, grid=1)
            targets = encode_targets([(1, 1.0, 2.0, 5.0, 4.0)], cfg)
            return GridDetector(cfg, r), r.uniform(0, 1, (3, 8, 8)), DetectorLossProbe(targets)
        return make

    return [
        ("AOD-Net", aodnet, SMOOTH_TOL),
        ("AOD-NetX", aodnetx, SMOOTH_TOL),
        ("micro U-Net", unet, PIECEWISE_TOL),
        ("micro DehazeNet", dehazenet, PIECEWISE_TOL),
        ("detector light", detector("light"), PIECEWISE_TOL),
        ("detector heavy", detector("heavy"), PIECEWISE_TOL),
    ]


def _probe(name, make, tol, seed, margin, with_target):
    for draw in range(MAX_DRAWS):
        rng = Rng(seed).child(draw)
        built = make(rng)
        model, x, loss = built if len(built) == 3 else (*built, None)
        _jitter(model, rng)
        if loss is None and with_target:
            out = model.forward(x)
            loss = MSELoss(rng.uniform(0, 1, out.shape))
        if kink_margin(model, x) >= margin:
            break
    else:
        raise RuntimeError(f"{name}: no probe point with kink margin >= {margin} in {MAX_DRAWS} draws")
    t0 = time.perf_counter()
    rep = grad_check(model, x, loss=loss, refine_above=REFINE_ABOVE)
    res = ProbeResult(name, rep.max_rel_error, tol, time.perf_counter() - t0, rep.n_checked, rep.n_refined)
    log.info("%s: max rel err %.3e (tol %.0e) in %.2fs", name, res.max_rel_error, tol, res.seconds)
    return res


def run_suite(seed=0, layers=True, models=True):
    """Run the probes and return a list of ProbeResult in a fixed order."""
    results = []
    if layers:
        for name, make, tol in _layer_probes():
            results.append(_probe(name, make, tol, seed, KINK_MARGIN, with_target=False))
    if models:
        for name, make, tol in _model_probes():
            results.append(_probe(name, make, tol, seed, MODEL_KINK_MARGIN, with_target=True))
    return results
