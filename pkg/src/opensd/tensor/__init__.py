from .core import (
    NonFiniteError,
    Tensor,
    abs,
    add,
    as_tensor,
    bce_with_logits,
    bilinear_sample,
    clamp_min,
    concat,
    cosine,
    cosine_matrix,
    div,
    exp,
    gelu,
    getitem,
    im2col3x3,
    l2_normalize,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
from .io import CheckpointError, dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from .nn import MLP, LayerNorm, Linear, Module, param
from .optim import Adam
