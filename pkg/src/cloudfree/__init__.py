"""Conditional diffusion for multi-temporal cloud removal at desk scale."""

__version__ = "0.1.0"
