"""Selective state-space chord estimation: features, models, metrics, training."""

__version__ = "0.1.0"
