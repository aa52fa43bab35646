"""Grid-world MAPF via behavioral cloning of bounded-suboptimal expert paths."""

from . import bench, dataset, decoder, expert, gridworld, policy

__all__ = ["bench", "dataset", "decoder", "expert", "gridworld", "policy"]
__version__ = "0.1.0"
