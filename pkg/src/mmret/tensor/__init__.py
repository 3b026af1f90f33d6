"""Minimal reverse-mode autodiff over dense float tensors."""

from mmret.tensor.core import (
    Parameter,
    Tape,
    TensorNode,
    as_node,
    backward,
    constant,
    precision,
    storage_dtype,
)
from mmret.tensor import ops

__all__ = [
    "Parameter",
    "Tape",
    "TensorNode",
    "as_node",
    "backward",
    "constant",
    "ops",
    "precision",
    "storage_dtype",
]
