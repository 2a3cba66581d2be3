"""Inverse reinforcement learning from summary observations."""

__version__ = "0.1.0"
