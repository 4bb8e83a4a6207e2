"""Numerical toolkit for the coupled gravity-fluid system of a
self-gravitating relativistic polytrope: weighted fractional Sobolev
machinery, fluid symbol analysis, initial-data reconstruction, the
conformal constraint pipeline, and a symmetric-hyperbolic evolution
driver with energy monitoring."""

__version__ = "0.1.0"
