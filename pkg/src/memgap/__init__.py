"""Memorization laboratory for score-based diffusion models on Gaussian mixtures."""

__version__ = "0.1.0"
