"""Micro dehazing networks with explicit backward passes.

Each model's ``forward`` returns the unclamped restored image (used for the
training loss and gradient checks); ``dehaze`` returns the clamped image for
evaluation.  Parameter names are stable and double as weight-archive keys.
"""

import numpy as np

from ..errors import ShapeError
from ..tensorcore import (Activation, BilinearUp, Conv2d, ConvBNReLU, MaxPool2, MaxPoolSame, Maxout,
                          Module, Sequential, concat, concat_backward)
from ..tensorcore.layers import activation, activation_backward

AOD_B = 1.0
DEHAZENET_T0 = 0.1
AIRLIGHT_FRACTION = 0.001


def recover_aod(image, k):
    """Reformulated scattering inversion ``J = K * I - K + b``."""
    return k * image - k + AOD_B


class AODTrunk(Module):
    """Five convolutions with inter-layer concatenations producing the K(x) estimate."""

    def __init__(self, rng):
        super().__init__()
        self.conv1 = Conv2d(3, 3, 1, rng)
        self.conv2 = Conv2d(3, 3, 3, rng)
        self.conv3 = Conv2d(6, 3, 5, rng)
        self.conv4 = Conv2d(6, 3, 7, rng)
        self.conv5 = Conv2d(12, 3, 3, rng)
        self.act = [Activation("relu") for _ in range(5)]

    def forward(self, x):
        a = self.act
        x1 = a[0].forward(self.conv1.forward(x))
        x2 = a[1].forward(self.conv2.forward(x1))
        c3, self._s3 = concat([x1, x2])
        x3 = a[2].forward(self.conv3.forward(c3))
        c4, self._s4 = concat([x2, x3])
        x4 = a[3].forward(self.conv4.forward(c4))
        c5, self._s5 = concat([x1, x2, x3, x4])
        return a[4].forward(self.conv5.forward(c5))

    def backward(self, dk):
        a = self.act
        dx1, dx2, dx3, dx4 = concat_backward(self.conv5.backward(a[4].backward(dk)), self._s5)
        d2, d3 = concat_backward(self.conv4.backward(a[3].backward(dx4)), self._s4)
        dx2 = dx2 + d2
        dx3 = dx3 + d3
        d1, d2 = concat_backward(self.conv3.backward(a[2].backward(dx3)), self._s3)
        dx1 = dx1 + d1
        dx2 = dx2 + d2
        dx1 = dx1 + self.conv2.backward(a[1].backward(dx2))
        return self.conv1.backward(a[0].backward(dx1))


def _check_image(image):
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"expected a (3, H, W) image or a batch of them, got {image.shape}",
                         dimension="C", expected=3, actual=image.shape)


class AODNet(Module):
    kind = "aodnet"

    def __init__(self, rng):
        super().__init__()
        self.trunk = AODTrunk(rng)

    def forward(self, image):
        _check_image(image)
        self._image = image
        self.k = self.trunk.forward(image)
        return recover_aod(image, self.k)

    def backward(self, dj):
        dk = dj * (self._image - 1.0)
        return dj * self.k + self.trunk.backward(dk)

    def dehaze(self, image, mask=None):
        j = self.forward(image)
        return {"K": self.k, "J": np.clip(j, 0.0, 1.0)}


class AODNetX(Module):
    """AOD-Net trunk whose K(x) is refined by RoI-driven spatial attention.

    ``alpha = sigmoid(conv3x3([K, M]))`` and ``K' = K * (1 + M * alpha)``, so
    pixels outside every RoI (M = 0) keep K exactly.
    """

    kind = "aodnetx"

    def __init__(self, rng):
        super().__init__()
        self.trunk = AODTrunk(rng)
        self.attention = Conv2d(4, 1, 3, rng)
        self.mask = None

    def forward(self, image, mask=None):
        _check_image(image)
        if mask is None:
            mask = self.mask if self.mask is not None else np.zeros((1,) + image.shape[-2:])
        if mask.shape[-3:] != (1,) + image.shape[-2:] or mask.ndim > image.ndim:
            raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape}",
                             dimension="mask", expected=(1,) + image.shape[-2:], actual=mask.shape)
        self._image = image
        self._mask = mask
        self.k = self.trunk.forward(image)
        att_in, self._split = concat([self.k, mask])
        self._z = self.attention.forward(att_in)
        self.alpha = activation(self._z, "sigmoid")
        self._gain = 1.0 + mask * self.alpha
        self.k_refined = self.k * self._gain
        return recover_aod(image, self.k_refined)

    def backward(self, dj):
        dkr = dj * (self._image - 1.0)
        dk = dkr * self._gain
        dalpha = (dkr * self.k).sum(axis=-3, keepdims=True) * self._mask
        dz = activation_backward(dalpha, self._z, self.alpha, "sigmoid")
        dk_att, _ = concat_backward(self.attention.backward(dz), self._split)
        return dj * self.k_refined + self.trunk.backward(dk + dk_att)

    def dehaze(self, image, mask=None):
        j = self.forward(image, mask)
        return {"K": self.k, "K_refined": self.k_refined, "alpha": self.alpha, "J": np.clip(j, 0.0, 1.0)}


class DoubleConv(Sequential):
    def __init__(self, c_in, c_out, rng):
        super().__init__(ConvBNReLU(c_in, c_out, 3, rng), ConvBNReLU(c_out, c_out, 3, rng))


class DehazeUNet(Module):
    """Two-level encoder/decoder with bilinear upsampling and skip concatenations.

    ``skip_gates`` scales each skip tensor before concatenation (1 = normal);
    setting one to 0 is the ablation probe for that connection.
    """

    kind = "unet"

    def __init__(self, rng):
        super().__init__()
        self.enc1 = DoubleConv(3, 8, rng)
        self.pool1 = MaxPool2()
        self.enc2 = DoubleConv(8, 16, rng)
        self.pool2 = MaxPool2()
        self.bottleneck = DoubleConv(16, 32, rng)
        self.up2 = BilinearUp()
        self.dec2 = DoubleConv(32 + 16, 16, rng)
        self.up1 = BilinearUp()
        self.dec1 = DoubleConv(16 + 8, 8, rng)
        self.head = Conv2d(8, 3, 1, rng)
        self.skip_gates = {"enc1": 1.0, "enc2": 1.0}

    def forward(self, image):
        _check_image(image)
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"U-Net input H and W must be divisible by 4, got {(h, w)}",
                             dimension="H" if h % 4 else "W", expected="multiple of 4", actual=(h, w))
        e1 = self.enc1.forward(image)
        e2 = self.enc2.forward(self.pool1.forward(e1))
        b = self.bottleneck.forward(self.pool2.forward(e2))
        c2, self._s2 = concat([self.up2.forward(b), e2 * self.skip_gates["enc2"]])
        d2 = self.dec2.forward(c2)
        c1, self._s1 = concat([self.up1.forward(d2), e1 * self.skip_gates["enc1"]])
        return self.head.forward(self.dec1.forward(c1))

    def backward(self, dj):
        du1, de1 = concat_backward(self.dec1.backward(self.head.backward(dj)), self._s1)
        du2, de2 = concat_backward(self.dec2.backward(self.up1.backward(du1)), self._s2)
        de2 = de2 * self.skip_gates["enc2"] + self.pool2.backward(self.bottleneck.backward(self.up2.backward(du2)))
        de1 = de1 * self.skip_gates["enc1"] + self.pool1.backward(self.enc2.backward(de2))
        return self.enc1.backward(de1)

    def dehaze(self, image, mask=None):
        return {"J": np.clip(self.forward(image), 0.0, 1.0)}


def estimate_airlight(image, fraction=AIRLIGHT_FRACTION):
    """Per-channel mean over the brightest ``fraction`` of pixels ranked by min-channel intensity.

    At least one pixel is always used; ties keep raster order.
    """
    if image.ndim == 4:
        return np.stack([estimate_airlight(im, fraction) for im in image])
    dark = image.min(axis=0).reshape(-1)
    n = max(1, int(np.ceil(fraction * dark.size)))
    idx = np.argsort(-dark, kind="stable")[:n]
    return image.reshape(3, -1)[:, idx].mean(axis=1)


class DehazeNet(Module):
    """Feature extraction + maxout, multi-scale mapping, local extremum, BReLU transmission."""

    kind = "dehazenet"

    def __init__(self, rng):
        super().__init__()
        self.features = Conv2d(3, 16, 5, rng)
        self.maxout = Maxout(4)
        self.scale3 = Conv2d(4, 4, 3, rng)
        self.scale5 = Conv2d(4, 4, 5, rng)
        self.scale7 = Conv2d(4, 4, 7, rng)
        self.extremum = MaxPoolSame(7)
        self.head = Conv2d(12, 1, 1, rng)
        self.brelu = Activation("brelu")
        self.airlight = None  # fixed airlight override; estimated per image when None

    def transmission(self, image):
        f = self.maxout.forward(self.features.forward(image))
        ms, self._split = concat([self.scale3.forward(f), self.scale5.forward(f), self.scale7.forward(f)])
        return self.brelu.forward(self.head.forward(self.extremum.forward(ms)))

    def forward(self, image):
        _check_image(image)
        self._image = image
        self.t = self.transmission(image)
        self.a = (estimate_airlight(image) if self.airlight is None
                  else np.asarray(self.airlight, dtype=np.float64))
        self._a = self.a[..., None, None]
        self._floored = np.maximum(self.t, DEHAZENET_T0)
        return (image - self._a) / self._floored + self._a

    def backward(self, dj):
        diff = self._image - self._a
        dfloor = -(dj * diff).sum(axis=-3, keepdims=True) / (self._floored ** 2)
        dt = dfloor * (self.t > DEHAZENET_T0)
        dms = self.extremum.backward(self.head.backward(self.brelu.backward(dt)))
        d3, d5, d7 = concat_backward(dms, self._split)
        df = self.scale3.backward(d3) + self.scale5.backward(d5) + self.scale7.backward(d7)
        dimg = self.features.backward(self.maxout.backward(df))
        return dimg + dj / self._floored

    def dehaze(self, image, mask=None):
        j = self.forward(image)
        return {"t": self.t, "A": self.a, "J": np.clip(j, 0.0, 1.0)}


class IdentityDehazer(Module):
    """Stub that returns its input unchanged; the K = 1 limit of the AOD recovery."""

    kind = "identity"

    def forward(self, image):
        return image.copy()

    def backward(self, dj):
        return dj

    def dehaze(self, image, mask=None):
        return {"J": np.clip(self.forward(image), 0.0, 1.0)}


MODEL_KINDS = {
    "aodnet": AODNet,
    "aodnetx": AODNetX,
    "unet": DehazeUNet,
    "dehazenet": DehazeNet,
}


def build_model(kind, rng):
    try:
        return MODEL_KINDS[kind](rng)
    except KeyError:
        raise ValueError(f"unknown dehazer kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
