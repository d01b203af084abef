"""Differentiable clustering toolkit: spatial mixtures trained by unrolled EM."""

__version__ = "0.1.0"
