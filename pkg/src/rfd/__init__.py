"""Differentiable FMCW radar simulation and mesh reconstruction."""

__version__ = "0.1.0"
