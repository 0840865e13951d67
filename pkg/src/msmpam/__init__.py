"""Piecewise exponential additive models for multi-state event histories."""

__version__ = "0.1.0"
