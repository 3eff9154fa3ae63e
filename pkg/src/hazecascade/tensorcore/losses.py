"""Scalar losses returning ``(value, gradient wrt pred)``."""

import numpy as np

from ..errors import ShapeError


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}",
                         dimension="shape", expected=target.shape, actual=pred.shape)


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_shape(pred, target)
    if np.any(pred <= 0.0) or np.any(pred >= 1.0):
        raise ValueError("bce predictions must lie strictly inside (0, 1)")
    n = pred.size
    value = -np.mean(target * np.log(pred) + (1.0 - target) * np.log1p(-pred))
    grad = (pred - target) / (pred * (1.0 - pred)) / n
    return float(value), grad


def bce_with_logits(logits, target):
    """BCE of sigmoid(logits), summed (not averaged); gradient is sigmoid(z) - y."""
    z = np.asarray(logits)
    z = z.astype(np.result_type(z, np.float64), copy=False)  # keeps extended precision if given
    y = np.asarray(target, dtype=z.dtype)
    # log(1 + exp(-|z|)) keeps both tails finite
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return per, sig - y


def log_softmax(logits, axis=0):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_ce(logits, target):
    """Cross-entropy of a single logit vector against an integer class index."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ShapeError("softmax_ce expects a 1-D logit vector", dimension="ndim", expected=1,
                         actual=logits.ndim)
    lsm = log_softmax(logits)
    grad = np.exp(lsm)
    grad[target] -= 1.0
    return float(-lsm[target]), grad


def loss(pred, target, kind):
    if kind == "mse":
        return mse(pred, target)
    if kind == "bce":
        return bce(pred, target)
    if kind == "softmax_ce":
        return softmax_ce(pred, target)
    raise ValueError(f"unknown loss {kind!r}")
