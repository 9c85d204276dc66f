"""Crowd counting with conditional diffusion density maps.

Narrow-kernel density maps are generated by a conditional denoising U-Net,
counted by connected-blob detection and merged across stochastic
realizations.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
