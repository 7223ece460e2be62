"""Graph-CNN body mesh regression from images, trained on synthetic data."""

__version__ = "0.1.0"
