"""Geometry-supervised attention for scene-consistent image generation, at desk scale."""

__version__ = "0.1.0"
