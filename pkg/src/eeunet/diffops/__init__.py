from .gradcheck import GradCheckReport, grad_check, run_op_suite
from .ops import (
    batch_norm2d,
    batch_norm2d_backward,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    max_pool2d,
    max_pool2d_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
)
from .optim import AdamState, ParamTensor, adam_step
