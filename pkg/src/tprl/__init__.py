"""Reinforcement-learned, user-invariant feature tokens for activity recognition."""

__version__ = "0.1.0"
