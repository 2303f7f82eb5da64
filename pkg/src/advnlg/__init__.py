"""Adversarial training for task-oriented NLG with a straight-through Gumbel-Softmax critic path."""
from . import kernels
from .config import TrainConfig

__version__ = "0.1.0"
__all__ = ["TrainConfig", "kernels", "__version__"]
