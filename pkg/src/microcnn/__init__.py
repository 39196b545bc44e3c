"""Small numpy CNN for two-class cell-image classification."""

from .model import Sequential, build_malaria_net, train_step
from .tensor import Rng

__all__ = ["Rng", "Sequential", "build_malaria_net", "train_step"]
__version__ = "0.1.0"
