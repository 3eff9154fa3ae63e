"""Central finite-difference verification of explicit backward passes.

Perturbed evaluations are batched: the probe input is replicated ``chunk``
times and the layer owning the parameter under test shifts one element per
batch member (see ``Module._perturb``).  Input elements are perturbed
directly in the replicated batch.  Relative error uses the denominator
``max(|analytic|, |numeric|, 1e-8)``.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm
from .rng import Rng


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0
    n_refined: int = 0
    max_refined_error: float = 0.0

    def passed(self, tol):
        return self.max_rel_error < tol


def rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


class ProjectionLoss:
    """Fixed random linear read-out ``sum(y * w)``."""

    def __init__(self, shape, seed=0):
        self.weights = Rng(seed).uniform(-1.0, 1.0, shape)

    def __call__(self, y):
        return float(np.sum(y * self.weights)), self.weights.copy()

    def batch(self, ys):
        return (ys * self.weights).reshape(len(ys), -1).sum(axis=1)

    def batch_diff(self, ys_plus, ys_minus):
        return ((ys_plus - ys_minus) * self.weights).reshape(len(ys_plus), -1).sum(axis=1)


class MSELoss:
    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def __call__(self, y):
        d = y - self.target
        return float(np.mean(d * d)), 2.0 * d / d.size

    def batch(self, ys):
        d = ys - self.target
        return (d * d).reshape(len(ys), -1).mean(axis=1)

    def batch_diff(self, ys_plus, ys_minus):
        # (a^2 - b^2) = (a - b)(a + b) avoids cancelling two large sums
        dp = ys_plus - self.target
        dm = ys_minus - self.target
        return ((dp - dm) * (dp + dm)).reshape(len(ys_plus), -1).mean(axis=1)


def _batch_diff(loss, plus, minus):
    """Per-member f(+eps) - f(-eps), using the loss's elementwise difference when available."""
    if hasattr(loss, "batch_diff"):
        return np.asarray(loss.batch_diff(plus, minus))
    if hasattr(loss, "batch"):
        return np.asarray(loss.batch(plus)) - np.asarray(loss.batch(minus))
    return np.array([loss(p)[0] - loss(m)[0] for p, m in zip(plus, minus)])


def kink_margin(model, x):
    """Smallest distance to a non-differentiable point over every piecewise layer, at ``x``."""
    model.forward(np.array(x, dtype=np.float64))
    margins = [m.kink_margin() for m in model.modules() if hasattr(m, "kink_margin")]
    return min(margins, default=np.inf)


def _freeze_running_stats(model):
    saved = []
    for m in model.modules():
        if isinstance(m, BatchNorm):
            saved.append((m, m.track_running))
            m.track_running = False
    return saved


def _numeric(model, x, loss, target, idx, steps):
    """Central-difference estimates for flat element indices ``idx`` of ``target``.

    ``target`` is ``(leaf, pname)`` for a parameter or None for the input.  One
    step gives the plain estimate; two steps ``(h, 2h)`` are combined by
    Richardson extrapolation, cancelling the O(h^2) truncation term.
    """
    rows = np.arange(len(idx))
    diffs = []
    for h in steps:
        outs = []
        for delta in (h, -h):
            xb = np.broadcast_to(x, (len(idx),) + x.shape).copy()
            if target is None:
                xb.reshape(len(idx), -1)[rows, idx] += delta
                outs.append(np.array(model.forward(xb)))
                continue
            leaf, pname = target
            leaf._perturb = (pname, idx, delta)
            try:
                outs.append(np.array(model.forward(xb)))
            finally:
                leaf._perturb = None
        diffs.append(_batch_diff(loss, *outs) / (2 * h))
    if len(diffs) == 1:
        return diffs[0]
    return (4 * diffs[0] - diffs[1]) / 3


@contextmanager
def _extended_precision(model):
    """Temporarily hold every parameter and buffer as ``np.longdouble``."""
    saved = []
    for m in model.modules():
        for store in (m.params, m.buffers):
            for k, v in store.items():
                saved.append((store, k, v))
                store[k] = v.astype(np.longdouble)
    try:
        yield
    finally:
        for store, k, v in saved:
            store[k] = v


def grad_check(model, x, eps=1e-5, loss=None, check_input=True, seed=0, chunk=256, refine_above=None):
    """Compare analytic gradients of ``model`` with central differences at ``x``.

    ``model`` needs batch-capable ``forward``, ``backward`` returning the input
    gradient, and the Module parameter accessors.  ``loss`` maps an output to
    ``(value, dout)`` and may provide ``batch_diff(plus, minus)`` returning
    per-member ``f(+eps) - f(-eps)`` summed elementwise, which keeps the
    difference free of cancellation between two large totals; by default a
    fixed random projection is used.  Every parameter element and, when
    ``check_input``, every input element is checked.

    The float64 estimate carries roundoff of order 1e-16 * cond / eps.  Where
    normalisation over a few pixels cancels most of a weight's effect, the
    true gradient can sit near 1e-7 while that roundoff is near 1e-11, so the
    estimate itself is too coarse for a 1e-5 relative test.  With
    ``refine_above`` set, elements whose relative error exceeds it are
    re-estimated in extended precision (``np.longdouble``) with Richardson
    extrapolation over steps ``eps`` and ``2 eps``; the analytic gradient is
    never touched.
    """
    x = np.array(x, dtype=np.float64)
    saved = _freeze_running_stats(model)
    try:
        out = model.forward(x.copy())
        if loss is None:
            loss = ProjectionLoss(out.shape, seed)
        _, dout = loss(out)
        dx = model.backward(dout)
        analytic = {name: g.copy() for name, g in model.named_grads().items()}
        if check_input and dx is not None:
            analytic["<input>"] = np.array(dx)

        targets = {prefix + pname: (leaf, pname)
                   for prefix, leaf in model.named_leaves() for pname in leaf.params}
        if "<input>" in analytic:
            targets["<input>"] = None
        numeric = {}
        for name, target in targets.items():
            size = analytic[name].size
            num = np.empty(size)
            for start in range(0, size, chunk):
                idx = np.arange(start, min(start + chunk, size))
                num[idx] = _numeric(model, x, loss, target, idx, (eps,))
            numeric[name] = num

        report = GradCheckReport(max_rel_error=0.0)
        if refine_above is not None:
            with _extended_precision(model):
                xl = x.astype(np.longdouble)
                for name, target in targets.items():
                    err = rel_error(analytic[name].ravel(), numeric[name])
                    bad = np.flatnonzero(err > refine_above)
                    for start in range(0, bad.size, chunk):
                        idx = bad[start:start + chunk]
                        refined = _numeric(model, xl, loss, target, idx, (eps, 2 * eps))
                        numeric[name][idx] = refined.astype(np.float64)
                        worst = float(rel_error(analytic[name].ravel()[idx], numeric[name][idx]).max())
                        report.max_refined_error = max(report.max_refined_error, worst)
                    report.n_refined += bad.size

        for name in targets:
            report.per_tensor[name] = float(rel_error(analytic[name].ravel(), numeric[name]).max())
            report.n_checked += analytic[name].size
    finally:
        for m, flag in saved:
            m.track_running = flag

    report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    return report
