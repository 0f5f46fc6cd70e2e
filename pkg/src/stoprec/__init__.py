"""Bayesian tuning of Monte Carlo matrix-inversion preconditioners."""

__version__ = "0.1.0"
