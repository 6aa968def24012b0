"""Causal intervention toolkit for small convolutional VAEs."""

__version__ = "0.1.0"
