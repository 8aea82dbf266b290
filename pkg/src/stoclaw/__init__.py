"""Numerical laboratory for viscous stochastic scalar conservation laws with zero-flux boundaries."""

__version__ = "0.1.0"
