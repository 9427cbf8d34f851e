"""Emotion primitives for behavior classification, on a small numpy autodiff engine."""

from .tensor import Tensor, Tape, backward, grad_check, no_grad

__all__ = ["Tensor", "Tape", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
