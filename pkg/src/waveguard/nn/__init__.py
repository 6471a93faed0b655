from .tensor import (
    ContractError,
    NumericError,
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    no_grad,
    set_default_dtype,
)
from .layers import (
    LEAKY_SLOPE,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    LayerSpec,
    LeakyReLU,
    MaxPool2d,
    Module,
    NonLocal2d,
    ReLU,
    ResidualBlock,
    SkipZConcat,
    Tanh,
    build_layer,
)
from .optim import Adam, adam_step, backtracking_step
from .ckpt import CheckpointError, load_ckpt, save_ckpt

__all__ = [
    "Tensor", "as_tensor", "no_grad", "set_default_dtype", "default_dtype",
    "NumericError", "ShapeError", "ContractError",
    "LayerSpec", "Module", "Dense", "Conv2d", "ConvTranspose2d", "BatchNorm2d",
    "ReLU", "LeakyReLU", "Tanh", "AvgPool2d", "MaxPool2d", "ResidualBlock",
    "NonLocal2d", "SkipZConcat", "build_layer", "LEAKY_SLOPE",
    "Adam", "adam_step", "backtracking_step",
    "save_ckpt", "load_ckpt", "CheckpointError",
]
