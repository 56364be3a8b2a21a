"""Bayesian kernel machine regression with causal mediation analysis."""

__version__ = "0.1.0"
