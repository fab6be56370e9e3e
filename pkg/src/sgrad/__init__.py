"""Surrogate-loss gradient estimation for stochastic computation graphs."""
__version__ = "0.1.0"
