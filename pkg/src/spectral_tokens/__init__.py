"""Spectral token adapters for a frozen segmentation encoder, on a numpy autodiff tape."""

from .adapter import AdapterConfig, preset, set_layer_forward
from .spectral import compose, decompose, dft2, idft2
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "GradTape",
    "Tensor",
    "compose",
    "decompose",
    "dft2",
    "idft2",
    "preset",
    "set_layer_forward",
]
