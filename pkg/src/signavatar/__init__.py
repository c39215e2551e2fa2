"""Spoken text to 3D sign animation: fitting, alignment, retrieval and stitching."""

__version__ = "0.1.0"
