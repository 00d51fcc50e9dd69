"""voxformer: volumetric classifiers (VViT, CVVT, ConvNet3D-4) on a small
reverse-mode autodiff engine, with a leakage-safe data pipeline and CLI."""

from .tensor import Tensor, ShapeError, no_grad
from .gradcheck import gradcheck

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "no_grad", "gradcheck", "__version__"]
