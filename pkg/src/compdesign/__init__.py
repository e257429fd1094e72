"""Compositional inverse design with diffusion models on an elastic N-body system."""
__version__ = "0.1.0"
