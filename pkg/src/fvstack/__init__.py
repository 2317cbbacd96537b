"""Hybrid Fisher Vector + neural network action classification on trajectory descriptors."""

__version__ = "0.1.0"
