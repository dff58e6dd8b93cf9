"""Dyadic sequence classification with attention between partners and recurrent slot memory."""

from .model import CPMT, Ablations, Batch, CPMTConfig, count_parameters, preset
from .tensor import Tensor, no_grad

__all__ = ["CPMT", "Ablations", "Batch", "CPMTConfig", "Tensor", "count_parameters", "no_grad", "preset"]
__version__ = "0.1.0"
