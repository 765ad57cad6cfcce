"""Numerical laboratory for invariant densities of noisy piecewise expanding maps."""

__version__ = "0.1.0"
