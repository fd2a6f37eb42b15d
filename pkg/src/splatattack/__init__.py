"""Differentiable Gaussian splatting micro-renderer and view-dependent attack workbench."""

__version__ = "0.1.0"
