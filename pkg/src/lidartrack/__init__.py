"""Transformer-based LiDAR detection and tracking on synthetic driving scenes."""

__version__ = "0.1.0"
