"""Implicit recommendation of solution product categories for support conversations."""

__version__ = "0.1.0"
