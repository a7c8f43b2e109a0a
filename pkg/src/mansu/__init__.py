"""Quantization-robust circuit-restricted unlearning on a toy residual MLP."""

__version__ = "0.1.0"
