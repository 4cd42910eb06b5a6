"""Dynamic multi-attribute editing of W+ codes on a synthetic frozen generator."""

from .net import DyStyleParams, NetConfig, active_cost, dystyle_forward, forward
from .trainer import TrainConfig, run_two_stage
from .world import AttributeSpec, FrozenWorld, WorldConfig, world_build

__all__ = [
    "AttributeSpec",
    "DyStyleParams",
    "FrozenWorld",
    "NetConfig",
    "TrainConfig",
    "WorldConfig",
    "active_cost",
    "dystyle_forward",
    "forward",
    "run_two_stage",
    "world_build",
]
__version__ = "0.1.0"
