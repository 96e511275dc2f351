"""Toolkit for mapping dataflow instruction graphs onto a tiled
streaming-engine array with a masked PPO policy, benchmarked against
simulated annealing, greedy and brute-force baselines."""

__version__ = "0.1.0"

from .device import DeviceConfig, PlacementState
from .ir_graph import IRGraph, InstructionNode, parse_ir, random_graph, serialize_ir

__all__ = [
    "DeviceConfig",
    "PlacementState",
    "IRGraph",
    "InstructionNode",
    "parse_ir",
    "random_graph",
    "serialize_ir",
    "__version__",
]
