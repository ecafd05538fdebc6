"""Dense math substrate: MLPs with reverse mode, Adam, seeded streams."""
from . import kernels
from .kernels import BACKEND
from .mlp import Mlp
from .optim import Adam, AdamState, adam_step
from .rng import Rng

__all__ = ["BACKEND", "Adam", "AdamState", "Mlp", "Rng", "adam_step", "kernels"]
