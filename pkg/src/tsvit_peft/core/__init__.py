from .checkpoint import CheckpointFormatError
from .gradcheck import finite_diff_grad, relative_error
from .nn import LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .rng import Rng
from .tensor import ContractViolation, NonFiniteError, Tensor, no_grad, precision

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointFormatError",
    "ContractViolation",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "Parameter",
    "Rng",
    "Tensor",
    "adam_step",
    "finite_diff_grad",
    "no_grad",
    "precision",
    "relative_error",
]
