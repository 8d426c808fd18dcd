"""Reverse-mode differentiation core: tensors, primitives, checks, Adam."""

from . import ops
from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, finite_diff_check
from .tensor import (ContractError, DimensionError, Graph, NonFiniteError, Tensor,
                     backward, constant, record)

__all__ = [
    "AdamState", "ContractError", "DimensionError", "GradCheckReport", "Graph",
    "NonFiniteError", "Tensor", "adam_step", "backward", "constant",
    "finite_diff_check", "ops", "record",
]
