"""Negative caption and image generation for visual grounding data."""

__version__ = "0.1.0"
