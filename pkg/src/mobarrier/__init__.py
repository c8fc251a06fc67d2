"""Mobility barrier detection from zone embeddings of movement trajectories."""

__version__ = "0.1.0"
