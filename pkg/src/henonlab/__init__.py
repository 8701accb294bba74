"""Finite-horizon parameter exclusion for Henon-like maps."""

__version__ = "0.1.0"
