"""Adaptive per-sample data augmentation trained jointly with a task model."""

__version__ = "0.1.0"
