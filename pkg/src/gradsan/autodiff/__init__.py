from gradsan.autodiff.network import (
    ACTIVATIONS,
    NetworkSpec,
    apply,
    forward,
    grad_of_grad_norm,
    init_params,
    input_gradient,
    penalty_value,
)
from gradsan.autodiff.serialize import (
    SerializationError,
    pack_params,
    pack_tensor,
    unpack_params,
    unpack_tensor,
)
from gradsan.autodiff.tape import Tape, Var, grad, vjp

__all__ = [
    "ACTIVATIONS",
    "NetworkSpec",
    "SerializationError",
    "Tape",
    "Var",
    "apply",
    "forward",
    "grad",
    "grad_of_grad_norm",
    "init_params",
    "input_gradient",
    "pack_params",
    "pack_tensor",
    "penalty_value",
    "unpack_params",
    "unpack_tensor",
    "vjp",
]
