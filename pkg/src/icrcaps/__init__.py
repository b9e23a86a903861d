"""p4 group-equivariant capsule networks with iterative collaborative routing."""
from .group import P4Element, act
from .network import Model, ModelConfig, TrainConfig, build, evaluate, load_checkpoint, save_checkpoint
from .routing import ICRConfig, icr_weights, route

__version__ = "0.1.0"
