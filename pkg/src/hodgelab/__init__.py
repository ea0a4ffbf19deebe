"""Discrete Hodge laboratory on a genus-2 hyperbolic surface with a flat unitary bundle."""

__version__ = "0.1.0"
