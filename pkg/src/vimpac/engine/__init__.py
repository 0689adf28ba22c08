from .checkpoint import CheckpointFormatError, load_params, save_params
from .gradcheck import finite_diff_check, numerical_grads
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm, global_norm, lr_at
from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    backward,
    batch_norm,
    broadcast_to,
    concat,
    cross_entropy,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    nll,
    no_grad,
    power,
    reshape,
    softmax,
    stack,
    transpose,
    tsum,
)

__all__ = [
    "AdamState", "BatchNormState", "CheckpointFormatError", "LrSchedule", "ShapeError", "Tensor",
    "add", "adam_step", "backward", "batch_norm", "broadcast_to", "clip_global_norm", "concat",
    "cross_entropy", "dropout", "embedding", "exp", "finite_diff_check", "gelu", "getitem",
    "global_norm", "layer_norm", "load_params", "log", "log_softmax", "lr_at", "matmul", "mean",
    "mul", "nll", "no_grad", "numerical_grads", "power", "reshape", "save_params", "softmax",
    "stack", "transpose", "tsum",
]
