"""Adversarial robustness evaluation for multi-label image classifiers."""

__version__ = "0.1.0"
