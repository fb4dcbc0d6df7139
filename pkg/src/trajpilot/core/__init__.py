from .checkpoint import load_module_state, load_tensors, save_module, save_tensors
from .gradcheck import grad_check
from .nn import (
    Block,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Transformer,
    attention_weights,
    masked_multihead_attention,
)
from .optim import AdamW, NonFiniteGradientError, OptimizerState, adamw_step
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    logsumexp,
    matmul,
    no_grad,
    parameter,
    softmax,
    stack,
    where,
)
