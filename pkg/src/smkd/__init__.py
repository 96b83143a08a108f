"""Masked teacher/student distillation for few-shot vision transformers, in numpy."""

from __future__ import annotations

from .tensor import NumericError, ParameterError, ShapeError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["NumericError", "ParameterError", "ShapeError", "Tensor", "backward", "no_grad", "__version__"]
