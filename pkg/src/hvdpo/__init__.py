"""Direct preference optimization for a desk-scale video diffusion model."""

__version__ = "0.1.0"
