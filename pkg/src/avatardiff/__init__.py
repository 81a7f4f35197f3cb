"""Consistency-focused talking-head diffusion toolkit (numpy/scipy)."""

__version__ = "0.1.0"
