from .optim import AdamState, NonFiniteGradient, adam_step, cosine_lr
from .params import CKPT_SCHEMA, ParamMismatch, Params, load_checkpoint, save_checkpoint
from .tensor import (
    BackwardOnNonScalar,
    ShapeMismatch,
    Tensor,
    abs_,
    add,
    concat,
    cos,
    gather,
    gradcheck,
    l1_loss,
    layer_norm,
    linear,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    numerical_grad,
    relu,
    reshape,
    row_scale,
    scale,
    scatter_add,
    segment_max,
    segment_mean,
    segment_softmax,
    segment_sum,
    sigmoid,
    sin,
    spmm,
    slice_,
    softmax,
    sub,
    sum_,
)
