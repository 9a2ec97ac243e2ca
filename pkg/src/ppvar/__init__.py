"""Posterior predictive variance decompositions for hierarchical Bayesian models."""

__version__ = "0.1.0"
