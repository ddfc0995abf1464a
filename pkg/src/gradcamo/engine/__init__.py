"""Dense tensor engine: tape autodiff, volumetric ops, and the hot kernels."""

from gradcamo.engine import ops
from gradcamo.engine.kernels import BACKEND, available_backends, get_backend
from gradcamo.engine.ops import resize_volume
from gradcamo.engine.tape import Tape, Tensor

__all__ = [
    "BACKEND",
    "Tape",
    "Tensor",
    "available_backends",
    "get_backend",
    "ops",
    "resize_volume",
]
