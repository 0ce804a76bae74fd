"""Transformer-based streamline tractography on synthetic diffusion phantoms."""

__version__ = "0.1.0"
