"""Continual-learning decoder with thalamic routing, episodic memory, and controlled replay."""

from .config import ModelConfig, RunConfig, desk_config, verification_config
from .net import CortexNet
from .tensor import Tensor, backward, no_grad
from .training import Trainer

__all__ = ["CortexNet", "ModelConfig", "RunConfig", "Tensor", "Trainer", "backward", "desk_config",
           "no_grad", "verification_config"]
__version__ = "0.1.0"
