"""Concentration bounds and Monte Carlo validation for stochastic approximation
driven by Markovian and martingale-difference noise."""

__version__ = "0.1.0"
