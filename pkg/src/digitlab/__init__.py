"""Numpy deep-learning micro-engine for digit recognition and generation."""
__version__ = "0.1.0"
