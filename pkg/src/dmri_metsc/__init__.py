"""dmri-metsc - model-embedded sparse-coding networks for diffusion MRI parameter estimation."""

__version__ = "0.1.0"
