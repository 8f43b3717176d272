from .optim import (
    LrSchedule,
    OptimizerState,
    Segment,
    constant_schedule,
    init_state,
    lr_at,
    nadam_step,
    nsgd_step,
    optimizer_step,
    piecewise_schedule,
    resnet_imagenet_schedule,
)
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    conv_output_size,
    flatten,
    linear,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    softmax_xent,
    square,
    transpose,
    tsum,
)
