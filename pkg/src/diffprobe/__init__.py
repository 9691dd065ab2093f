"""Diffusion U-Net features as discriminative representations, at desk scale."""

__version__ = "0.1.0"
