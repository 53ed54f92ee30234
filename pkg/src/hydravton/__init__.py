"""hydravton: a desk-scale latent-diffusion try-on pipeline built from
scratch, exercising multi-branch garment attention with K/V fusion, residual
checkpoint merging with greedy coefficient search, and keypoint-driven
adaptive masking."""

from .rng import Rng
from .serialize import WeightMap
from .tensor import GradTape, NumericsError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "Tensor",
    "GradTape",
    "WeightMap",
    "ShapeError",
    "NumericsError",
    "no_grad",
    "__version__",
]
