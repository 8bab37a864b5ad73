"""Non-equivariant backbones (and the invariant auxiliaries) that ECSE symmetrizes."""

from .base import Prediction, back_rotate, rotate_tensor
from .graph import PaddedGraph, build_graph, union
from .mlp import CapacityError, MlpBackbone, RadialAux, predict_local
from .pet import PetModel, PetShape, pet2body, pet_layout, random_init

__all__ = [
    "CapacityError",
    "MlpBackbone",
    "PaddedGraph",
    "PetModel",
    "PetShape",
    "Prediction",
    "RadialAux",
    "back_rotate",
    "build_graph",
    "pet2body",
    "pet_layout",
    "predict_local",
    "random_init",
    "rotate_tensor",
    "union",
]
