"""Split diffusion-based semantic communication simulator."""

__version__ = "0.1.0"
