from .tensor import (
    NonFiniteError,
    Tensor,
    assert_finite,
    concat,
    conv1d,
    layer_norm,
    repeat2,
    softmax,
)
from .nn import MLP, Conv1d, LayerNorm, Linear, Module, ParamStore, SelfAttention, linear_forward
from .optim import AdamState, adam_step
from .container import (
    ASSET_MAGIC,
    CHECKPOINT_MAGIC,
    DATASET_MAGIC,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)

__all__ = [
    "ASSET_MAGIC", "CHECKPOINT_MAGIC", "DATASET_MAGIC", "AdamState", "Conv1d",
    "LayerNorm", "Linear", "MLP", "Module", "NonFiniteError", "ParamStore",
    "SelfAttention", "Tensor", "adam_step", "assert_finite", "concat", "conv1d",
    "layer_norm", "linear_forward", "load_checkpoint", "read_container",
    "repeat2", "save_checkpoint", "softmax", "write_container",
]
