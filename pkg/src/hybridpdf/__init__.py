"""Hybrid density estimation for Fokker-Planck equations of conditional Gaussian systems."""
__version__ = "0.1.0"
