"""Bayesian domain randomization with strategic policy fine-tuning, at desk scale."""

__version__ = "0.1.0"
