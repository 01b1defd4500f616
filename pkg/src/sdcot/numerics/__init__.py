"""Minimal float64 tensor engine: autodiff ops, parameter stores, Adam, RNG."""
from . import tensor as ops
from .gradcheck import NumericError, grad_check
from .optim import AdamState, adam_step
from .params import InvariantError, ParamStore
from .rng import RngStream
from .tensor import DimensionError, FrozenParameterError, Tensor

__all__ = [
    "AdamState",
    "DimensionError",
    "FrozenParameterError",
    "InvariantError",
    "NumericError",
    "ParamStore",
    "RngStream",
    "Tensor",
    "adam_step",
    "grad_check",
    "ops",
]
