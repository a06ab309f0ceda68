"""Float64 tensors, tape-based reverse mode, gradient checking and Adam."""

from . import tensor as ops
from .adam import AdamState, ContractViolation, adam_step
from .gradcheck import GradCheckReport, NumericalInstabilityError, grad_check, grad_check_report
from .params import ModelParams
from .tensor import Parameter, ShapeError, Tape, Tensor, no_grad, softmax

__all__ = [
    "AdamState",
    "ContractViolation",
    "GradCheckReport",
    "ModelParams",
    "NumericalInstabilityError",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "grad_check",
    "grad_check_report",
    "no_grad",
    "ops",
    "softmax",
]
