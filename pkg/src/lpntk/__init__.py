"""Labelled pseudo neural tangent kernels for small classifiers and DQN agents."""

__version__ = "0.1.0"
