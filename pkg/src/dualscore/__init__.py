"""Normalized energy models learned by dual score matching."""

__version__ = "0.1.0"
