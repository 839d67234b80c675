"""Clothed human reconstruction from front/back normal maps."""

__version__ = "0.1.0"
