"""Colorize grayscale microscopy images by predicting CIELAB chroma from luminance."""

__version__ = "0.1.0"
CHECKPOINT_FORMAT_VERSION = 1
