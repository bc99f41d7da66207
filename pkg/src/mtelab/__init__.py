"""Mutual-transport co-training of calibrated classifiers, with baselines and
calibration / detection metrics."""

__version__ = "0.1.0"
