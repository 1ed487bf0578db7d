"""Mask-conditioned diffusion inpainting for 2D grayscale slices."""

__version__ = "0.1.0"
