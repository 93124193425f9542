"""Bayesian hierarchical VO2 model with an Ornstein-Uhlenbeck error process."""

__version__ = "0.1.0"
