"""Layers with explicit forward/backward passes.

Tensors are float64 ndarrays shaped ``(C, H, W)`` or batched ``(N, C, H, W)``;
every function accepts both and returns the matching rank.  Functional forms
return ``(output, cache)`` and their ``*_backward`` partners consume the
cache; the :class:`Module` classes wrap them with parameters and gradients.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_batch(x, name="input"):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be (C, H, W) or (N, C, H, W), got shape {x.shape}",
                     dimension="ndim", expected="3 or 4", actual=x.ndim)


def _unbatch(x, squeeze):
    return x[0] if squeeze else x


# --- conv2d -----------------------------------------------------------------

def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias, stride=1, padding=0):
    x, squeeze = _as_batch(x)
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}", dimension="kernel",
                         expected="odd square", actual=(kh, kw))
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels {x.shape[1]} do not match weight C_in {c_in}",
                         dimension="C_in", expected=c_in, actual=x.shape[1])
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out {c_out}",
                         dimension="C_out", expected=(c_out,), actual=bias.shape)
    h, w = x.shape[2:]
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"output would be empty for input {h}x{w}, kernel {kh}",
                         dimension="H" if ho < 1 else "W", expected=">= 1", actual=(ho, wo))
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    # win: (N, C_in, Ho, Wo, k, k)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    if kh == 1:
        out = np.einsum("oi,nihw->nohw", weight[:, :, 0, 0], win[..., 0, 0])
    else:
        out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias[:, None, None]
    return _unbatch(out, squeeze), (squeeze, x.shape, xp.shape, win, weight, stride, padding)


def conv2d_backward(dout, cache):
    squeeze, x_shape, xp_shape, win, weight, stride, padding = cache
    dout, _ = _as_batch(dout)
    k = weight.shape[2]
    ho, wo = dout.shape[2:]
    # per kernel offset: cheaper than contracting the full window view at once
    dw = np.empty(weight.shape, dtype=np.result_type(dout, win))
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.tensordot(dout, win[..., i, j], axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    if k == 1:
        dxp = np.einsum("oi,nohw->nihw", weight[:, :, 0, 0], dout)
        if stride > 1:
            full = np.zeros(xp_shape)
            full[:, :, ::stride, ::stride][:, :, :ho, :wo] = dxp
            dxp = full
    elif stride == 1 and padding <= k - 1:
        # full correlation with the flipped, transposed kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv2d(dout, flipped, np.zeros(flipped.shape[0], dtype=flipped.dtype), 1, k - 1 - padding)
        return _unbatch(dx, squeeze), dw, db
    else:
        dcols = np.tensordot(dout, weight, axes=([1], [0]))  # (N, Ho, Wo, C_in, k, k)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)            # (N, C_in, k, k, Ho, Wo)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]]
    return _unbatch(np.ascontiguousarray(dxp), squeeze), dw, db


# --- activations ------------------------------------------------------------

def activation(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "brelu":
        return np.clip(x, 0.0, 1.0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout, x, y, kind):
    """``x`` is the pre-activation, ``y`` the activation output."""
    if kind == "relu":
        return dout * (x > 0)
    if kind == "sigmoid":
        return dout * y * (1.0 - y)
    if kind == "brelu":
        return dout * ((x > 0) & (x < 1))
    raise ValueError(f"unknown activation {kind!r}")


def kink_distance(x, kind):
    """Distance from each pre-activation to the nearest non-differentiable point."""
    if kind == "relu":
        return np.abs(x)
    if kind == "brelu":
        return np.minimum(np.abs(x), np.abs(x - 1.0))
    return np.full(x.shape, np.inf)


# --- maxout -----------------------------------------------------------------

def maxout(x, group):
    """Max over consecutive groups of ``group`` channels; ties go to the lowest channel."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if group < 1 or c % group:
        raise ShapeError(f"maxout group size {group} does not divide {c} channels",
                         dimension="C", expected=f"multiple of {group}", actual=c)
    xg = x.reshape(n, c // group, group, h, w)
    idx = np.argmax(xg, axis=2)
    out = np.take_along_axis(xg, idx[:, :, None], axis=2)[:, :, 0]
    return _unbatch(out, squeeze), (squeeze, x.shape, idx, group)


def maxout_backward(dout, cache):
    squeeze, shape, idx, group = cache
    dout, _ = _as_batch(dout)
    n, c, h, w = shape
    dxg = np.zeros((n, c // group, group, h, w))
    np.put_along_axis(dxg, idx[:, :, None], dout[:, :, None], axis=2)
    return _unbatch(dxg.reshape(shape), squeeze)


def _top2_gap(values, axis):
    """Gap between the two largest entries along ``axis``.

    Groups whose maximum is exactly zero are reported as infinitely far from a
    tie: they only arise from rectified inputs, whose kink the ReLU reports.
    """
    part = -np.partition(-values, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    gap = top - np.take(part, 1, axis=axis)
    return np.where(top == 0.0, np.inf, gap)


# --- pooling ----------------------------------------------------------------

def maxpool_same(x, k):
    """Stride-1 max filter with edge-replicated borders; output shape equals input shape."""
    x, squeeze = _as_batch(x)
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"pool size must be odd, got {k}", dimension="kernel", expected="odd", actual=k)
    if k == 1:
        return _unbatch(x.copy(), squeeze), (squeeze, x.shape, None, 1, None)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    n, c, h, w = x.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(n, c, h, w, k * k)
    arg = np.argmax(win, axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return _unbatch(out, squeeze), (squeeze, x.shape, arg, k, win)


def maxpool_same_backward(dout, cache):
    squeeze, shape, arg, k, _ = cache
    if k == 1:
        return dout.copy()
    dout, _ = _as_batch(dout)
    n, c, h, w = shape
    p = k // 2
    nn, cc, ii, jj = np.indices((n, c, h, w), sparse=True)
    rows = np.clip(ii + arg // k - p, 0, h - 1)
    cols = np.clip(jj + arg % k - p, 0, w - 1)
    dx = np.zeros(shape)
    np.add.at(dx, (nn, cc, rows, cols), dout)
    return _unbatch(dx, squeeze)


def maxpool2(x):
    """2x2 max pool with stride 2 (H and W must be even)."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}", dimension="H" if h % 2 else "W",
                         expected="even", actual=(h, w))
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=4)
    out = np.take_along_axis(blocks, arg[..., None], axis=4)[..., 0]
    return _unbatch(out, squeeze), (squeeze, x.shape, arg, blocks)


def maxpool2_backward(dout, cache):
    squeeze, shape, arg, _ = cache
    dout, _ = _as_batch(dout)
    n, c, h, w = shape
    db = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(db, arg[..., None], dout[..., None], axis=4)
    dx = db.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return _unbatch(dx, squeeze)


# --- bilinear upsampling ----------------------------------------------------

def _interp_matrix(n, factor):
    """Rows map output positions to input weights (align_corners=False, clamped at the edges)."""
    m = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_up(x, factor=2):
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    x, squeeze = _as_batch(x)
    h, w = x.shape[2:]
    uh = _interp_matrix(h, factor)
    uw = _interp_matrix(w, factor)
    out = np.matmul(np.matmul(uh, x), uw.T)
    return _unbatch(out, squeeze), (squeeze, uh, uw)


def bilinear_up_backward(dout, cache):
    squeeze, uh, uw = cache
    dout, _ = _as_batch(dout)
    return _unbatch(np.matmul(np.matmul(uh.T, dout), uw), squeeze)


# --- concat -----------------------------------------------------------------

def concat(inputs):
    """Channel concatenation; inputs with fewer leading dims are broadcast over the batch."""
    if not inputs:
        raise ShapeError("concat needs at least one input", dimension="inputs", expected=">= 1", actual=0)
    for t in inputs:
        if t.ndim not in (3, 4):
            raise ShapeError(f"concat inputs must be 3-D or 4-D, got {t.shape}", dimension="ndim",
                             expected="3 or 4", actual=t.ndim)
    hw = inputs[0].shape[-2:]
    for i, t in enumerate(inputs):
        if t.shape[-2:] != hw:
            raise ShapeError(f"concat input {i} has spatial shape {t.shape[-2:]}, expected {hw}",
                             dimension="H" if t.shape[-2] != hw[0] else "W", expected=hw, actual=t.shape[-2:])
    lead = max((t.shape[:-3] for t in inputs), key=len)
    parts = [np.broadcast_to(t, lead + t.shape[-3:]) if t.shape[:-3] != lead else t for t in inputs]
    return np.concatenate(parts, axis=-3), [(t.shape[-3], t.ndim) for t in inputs]


def concat_backward(dout, cache):
    sizes = [c for c, _ in cache]
    pieces = np.split(dout, np.cumsum(sizes)[:-1], axis=-3)
    return [p.sum(axis=0) if nd < dout.ndim else p for p, (_, nd) in zip(pieces, cache)]


# --- batchnorm --------------------------------------------------------------

def batchnorm(x, gamma, beta, mode, running_mean, running_var, eps=BN_EPS):
    """Per-channel normalisation over the spatial positions of each image separately.

    Train mode also returns updated running statistics (momentum 0.1, unbiased
    variance, averaged over the batch); the caller decides whether to keep them.
    """
    x, squeeze = _as_batch(x)
    if mode == "train":
        n = x.shape[2] * x.shape[3]
        mean = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var[:, :, 0, 0] * (n / (n - 1) if n > 1 else 1.0)
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean[:, :, 0, 0].mean(axis=0)
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased.mean(axis=0)
    elif mode == "eval":
        inv = (1.0 / np.sqrt(running_var + eps))[None, :, None, None]
        xhat = (x - running_mean[None, :, None, None]) * inv
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    return _unbatch(out, squeeze), (squeeze, mode, xhat, inv, gamma), new_mean, new_var


def batchnorm_backward(dout, cache):
    squeeze, mode, xhat, inv, gamma = cache
    dout, _ = _as_batch(dout)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[:, None, None]
    if mode == "eval":
        return _unbatch(dxhat * inv, squeeze), dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return _unbatch(dx, squeeze), dgamma, dbeta


# --- modules ----------------------------------------------------------------

class Module:
    """Parameter container; subclasses implement ``forward`` and ``backward``.

    ``grads`` is overwritten by every backward call, never accumulated.
    Parametrised leaves honour ``_perturb = (param, flat_indices, delta)``:
    on a batched forward, batch member ``n`` behaves as if element
    ``flat_indices[n]`` of ``param`` were shifted by ``delta``.  The shift is
    applied through the layer's linearity in its own parameters; the gradient
    checker uses it to evaluate many perturbed forwards in one pass.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.training = False
        self._perturb = None

    def children(self):
        out = []
        for k, v in vars(self).items():
            if isinstance(v, Module):
                out.append((k, v))
            elif isinstance(v, (list, tuple)):
                out.extend((f"{k}{i}", m) for i, m in enumerate(v) if isinstance(m, Module))
        return out

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_params(self, prefix=""):
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def named_grads(self, prefix=""):
        out = {prefix + k: v for k, v in self.grads.items()}
        for name, child in self.children():
            out.update(child.named_grads(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self.buffers.items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def named_leaves(self, prefix=""):
        """(dotted prefix, module) for every module that owns parameters."""
        out = [(prefix, self)] if self.params else []
        for name, child in self.children():
            out.extend(child.named_leaves(f"{prefix}{name}."))
        return out

    def state_dict(self):
        state = dict(self.named_params())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {src.shape}",
                                 dimension=name, expected=arr.shape, actual=src.shape)
            arr[...] = src

    def train(self, flag=True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def num_params(self):
        return sum(v.size for v in self.named_params().values())


def he_uniform(rng, c_out, c_in, k):
    bound = np.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, (c_out, c_in, k, k))


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding="same", bias=True):
        super().__init__()
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}", dimension="kernel", expected="odd", actual=k)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding == "same" else int(padding)
        self.params = {"weight": he_uniform(rng, c_out, c_in, k)}
        if bias:
            self.params["bias"] = np.zeros(c_out)

    def _bias(self):
        b = self.params.get("bias")
        return b if b is not None else np.zeros(self.params["weight"].shape[0])

    def forward(self, x):
        out, self._cache = conv2d(x, self.params["weight"], self._bias(), self.stride, self.padding)
        if self._perturb is not None:
            name, idx, delta = self._perturb
            win = self._cache[3]
            rows = np.arange(len(idx))
            if name == "bias":
                out[rows, idx] += delta
            else:
                o, i, a, b = np.unravel_index(idx, self.params["weight"].shape)
                out[rows, o] += delta * win[rows, i, :, :, a, b]
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.grads = {"weight": dw}
        if "bias" in self.params:
            self.grads["bias"] = db
        return dx


class Activation(Module):
    def __init__(self, kind):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        self._x = x
        self._y = activation(x, self.kind)
        return self._y

    def backward(self, dout):
        return activation_backward(dout, self._x, self._y, self.kind)

    def kink_margin(self):
        return float(kink_distance(self._x, self.kind).min())


class Maxout(Module):
    def __init__(self, group):
        super().__init__()
        self.group = group

    def forward(self, x):
        self._x = x
        out, self._cache = maxout(x, self.group)
        return out

    def backward(self, dout):
        return maxout_backward(dout, self._cache)

    def kink_margin(self):
        if self.group == 1:
            return np.inf
        x, _ = _as_batch(self._x)
        n, c, h, w = x.shape
        return float(_top2_gap(x.reshape(n, c // self.group, self.group, h, w), axis=2).min())


class MaxPoolSame(Module):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x):
        out, self._cache = maxpool_same(x, self.k)
        return out

    def backward(self, dout):
        return maxpool_same_backward(dout, self._cache)

    def kink_margin(self):
        win = self._cache[4]
        if win is None:
            return np.inf
        # replicated borders repeat values, so gaps are measured over distinct window entries
        srt = np.sort(win, axis=-1)
        top = srt[..., -1:]
        below = np.where(srt < top, srt, -np.inf).max(axis=-1)
        gap = np.where(top[..., 0] == 0.0, np.inf, top[..., 0] - below)
        return float(gap.min())


class MaxPool2(Module):
    def forward(self, x):
        out, self._cache = maxpool2(x)
        return out

    def backward(self, dout):
        return maxpool2_backward(dout, self._cache)

    def kink_margin(self):
        return float(_top2_gap(self._cache[3], axis=-1).min())


class BilinearUp(Module):
    def forward(self, x):
        out, self._cache = bilinear_up(x, 2)
        return out

    def backward(self, dout):
        return bilinear_up_backward(dout, self._cache)


class BatchNorm(Module):
    """Running statistics move only when ``training`` and ``track_running`` are both set."""

    def __init__(self, channels):
        super().__init__()
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.track_running = True

    def forward(self, x):
        mode = "train" if self.training else "eval"
        out, self._cache, mean, var = batchnorm(x, self.params["gamma"], self.params["beta"], mode,
                                                self.buffers["running_mean"], self.buffers["running_var"])
        if self.training and self.track_running:
            self.buffers["running_mean"][...] = mean
            self.buffers["running_var"][...] = var
        if self._perturb is not None:
            name, idx, delta = self._perturb
            rows = np.arange(len(idx))
            if name == "beta":
                out[rows, idx] += delta
            else:
                out[rows, idx] += delta * self._cache[2][rows, idx]
        return out

    def backward(self, dout):
        dx, dg, db = batchnorm_backward(dout, self._cache)
        self.grads = {"gamma": dg, "beta": db}
        return dx


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), m) for i, m in enumerate(self.layers)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class ConvBNReLU(Sequential):
    """Conv (no bias; the normalisation cancels it) -> BatchNorm -> ReLU."""

    def __init__(self, c_in, c_out, k, rng, stride=1):
        super().__init__(Conv2d(c_in, c_out, k, rng, stride=stride, bias=False), BatchNorm(c_out),
                         Activation("relu"))


class Linear(Module):
    """Dense layer on a flat vector (or a batch of them)."""

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        bound = np.sqrt(6.0 / n_in)
        self.params = {"weight": rng.uniform(-bound, bound, (n_out, n_in)), "bias": np.zeros(n_out)}

    def forward(self, x):
        self._x = x
        out = x @ self.params["weight"].T + self.params["bias"]
        if self._perturb is not None:
            name, idx, delta = self._perturb
            rows = np.arange(len(idx))
            if name == "bias":
                out[rows, idx] += delta
            else:
                o, i = np.unravel_index(idx, self.params["weight"].shape)
                out[rows, o] += delta * x[rows, i]
        return out

    def backward(self, dout):
        x = self._x
        if x.ndim == 1:
            self.grads = {"weight": np.outer(dout, x), "bias": dout.copy()}
        else:
            self.grads = {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"]
