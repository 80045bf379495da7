"""Minimal dense-tensor core with reverse-mode gradients."""
from .core import (
    NonFiniteError,
    Tensor,
    add,
    concat,
    div,
    exp,
    is_checked,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    max_reduce,
    mean,
    mul,
    relu,
    reshape,
    set_checked,
    sigmoid,
    softmax,
    stack,
    stop_gradient,
    sub,
    transpose,
)
from .functional import (
    DegenerateBatchError,
    avg_pool,
    conv,
    conv1d,
    conv2d,
    conv3d,
    cosine_distance,
    cross_entropy,
    linear,
    max_pool,
    max_pool_temporal,
    mlp_forward,
    mse,
    pad_edge,
    pairwise_distances,
    triplet_loss_batch_all,
)
from .params import (
    CheckpointError,
    ParameterStore,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    step_lr,
)
