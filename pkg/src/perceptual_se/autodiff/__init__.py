"""Minimal reverse-mode differentiation over numpy arrays."""
from . import ops
from .tensor import (ShapeError, Tensor, as_tensor, backward, default_dtype, no_grad, precision,
                     reference_precision, set_default_dtype)

__all__ = ["ShapeError", "Tensor", "as_tensor", "backward", "default_dtype", "no_grad", "ops",
           "precision", "reference_precision", "set_default_dtype"]
