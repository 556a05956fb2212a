"""Segmented point-cloud imitation learning with diffusion action decoding."""

__version__ = "0.1.0"
