"""Functional causal Bayesian optimisation."""

__version__ = "0.1.0"
