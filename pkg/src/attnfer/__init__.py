"""Attention blocks (SE, ECA, CBAM) and CNN backbones on a small numpy framework."""

__version__ = "0.1.0"
