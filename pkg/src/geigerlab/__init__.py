"""Geiger-mode APD detector simulation and characterization toolkit."""

__version__ = "0.1.0"
