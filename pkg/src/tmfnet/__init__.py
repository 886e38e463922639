"""Trimap-guided matting network: library and CLI."""

__version__ = "0.1.0"

from .autograd import HIGH_DTYPE, STANDARD_DTYPE, Tape, Tensor

__all__ = ["Tensor", "Tape", "STANDARD_DTYPE", "HIGH_DTYPE", "__version__"]
