from .gradcheck import GradCheckReport, grad_check, rel_error
from .layers import (
    Activation,
    BatchNorm,
    BilinearUp,
    Conv2d,
    ConvBNReLU,
    Linear,
    MaxPool2,
    MaxPoolSame,
    Maxout,
    Module,
    Sequential,
    activation,
    activation_backward,
    batchnorm,
    batchnorm_backward,
    bilinear_up,
    bilinear_up_backward,
    concat,
    concat_backward,
    conv2d,
    conv2d_backward,
    maxout,
    maxout_backward,
    maxpool2,
    maxpool2_backward,
    maxpool_same,
    maxpool_same_backward,
)
from .losses import bce, bce_with_logits, loss, mse, softmax_ce
from .optim import SGD, Adam
from .rng import Rng, splitmix64
