"""surfdiff: conditional implicit-surface diffusion for single-image 3D reconstruction."""

__version__ = "0.1.0"
