"""Completely unsupervised salient object detection from backbone activations."""

__version__ = "0.1.0"
