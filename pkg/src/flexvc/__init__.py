"""Smooth backfitting for flexible generalized varying coefficient models."""
__version__ = "0.1.0"
