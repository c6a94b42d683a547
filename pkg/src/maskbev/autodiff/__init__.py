from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    conv2d,
    div,
    exp,
    expand,
    gelu,
    getitem,
    global_avg_pool,
    layernorm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pad,
    power,
    relu,
    reshape,
    roll,
    sigmoid,
    softmax,
    softmax_np,
    split,
    sub,
    sum_,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, check_tensors, grad_check, relative_error
from . import checkpoint
