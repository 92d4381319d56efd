"""Residual skill learning for simulated peg-in-hole assembly."""

__version__ = "0.1.0"
