"""Forster transforms via box-constrained Newton on Barthe's objective."""

__version__ = "1.0.0"
