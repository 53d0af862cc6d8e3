"""Hierarchical RL for autonomous navigation of a clamping in-pipe snake robot."""

__version__ = "0.1.0"
