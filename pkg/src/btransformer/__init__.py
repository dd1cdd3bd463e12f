"""From-scratch transformer-encoder classifier for multi-label relation extraction."""

from .config import ModelConfig, load_config
from .model import BTransformer
from .tensor import Tensor, backward, no_grad

__all__ = ["BTransformer", "ModelConfig", "Tensor", "backward", "load_config", "no_grad"]
__version__ = "0.1.0"
