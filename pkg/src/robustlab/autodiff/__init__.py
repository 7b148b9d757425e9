from .functional import affine_warp, batch_norm, conv2d, cross_entropy, linear, log_sigmoid, log_softmax
from .nn import Classifier, build_architecture
from .optim import AdamState, ArrayAdam, NonFiniteGradient, adam_step
from .tensor import (
    TapeError,
    Tensor,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    stack,
    tensor,
    where,
)


def forward(model: Classifier, batch) -> Tensor:
    return model.forward(batch)


def backward(scalar_loss: Tensor) -> None:
    scalar_loss.backward()


__all__ = [
    "AdamState",
    "ArrayAdam",
    "Classifier",
    "NonFiniteGradient",
    "TapeError",
    "Tensor",
    "adam_step",
    "affine_warp",
    "backward",
    "batch_norm",
    "build_architecture",
    "concat",
    "conv2d",
    "cross_entropy",
    "default_dtype",
    "forward",
    "get_default_dtype",
    "linear",
    "log_sigmoid",
    "log_softmax",
    "no_grad",
    "set_default_dtype",
    "stack",
    "tensor",
    "where",
]
