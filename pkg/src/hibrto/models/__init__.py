"""Forward models: affine test maps, 1-d diffusion, and 2-d attenuation scans."""

from .base import ForwardModel
from .data import elliptic_true_field, generate_synthetic_data, pet_true_field
from .elliptic import EllipticModel1D
from .linear import LinearModel
from .pet import PetGeometry, PetModel2D, PetSystem, pet_system_matrix, trace_ray

__all__ = [
    "EllipticModel1D",
    "ForwardModel",
    "LinearModel",
    "PetGeometry",
    "PetModel2D",
    "PetSystem",
    "elliptic_true_field",
    "generate_synthetic_data",
    "pet_system_matrix",
    "pet_true_field",
    "trace_ray",
]
