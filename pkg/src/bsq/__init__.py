"""Stochastic Boussinesq spectral simulator and bracket toolkit."""

__version__ = "0.1.0"
