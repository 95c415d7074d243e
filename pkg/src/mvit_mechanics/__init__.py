"""Multiscale vision transformer mechanics: pooling attention, relative positions, cost accounting."""

__version__ = "0.1.0"
