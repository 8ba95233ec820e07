from .autograd import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    all_finite,
    as_tensor,
    attention,
    broadcast_to,
    concat,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    parameter,
    reciprocal,
    reshape,
    scatter_rows,
    set_default_dtype,
    sigmoid,
    softmax,
    sub,
    swapaxes,
    swish,
    take_rows,
    tanh,
    transpose,
    tsum,
    zeros,
)
from .checkpoint import (CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                         save_checkpoint)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import Adam, AdamState, LRSchedule, NonFiniteGradient, adam_step, clip_grad_norm, lr_at
