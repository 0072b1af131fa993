"""Probabilistic image-to-shape models with uncertainty calibration on synthetic shape populations."""

__version__ = "0.1.0"
