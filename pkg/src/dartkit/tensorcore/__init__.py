from .tensor import Tensor, no_grad, as_tensor, tabs
from .ops import (
    ShapeError,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    maxpool2x2,
    pad_replicate,
    relu,
    sigmoid,
)
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, ModuleList, Parameter
from .optim import NonFiniteGradientError, OptimizerState, adamw_step, clip_grad_norm
from .gradcheck import GradCheckReport, finite_diff_check
from .dtsr import read_dtsr, write_dtsr, save_checkpoint, load_checkpoint
