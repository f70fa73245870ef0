"""Stochastic landing-hazard detection on Gaussian-random-field terrain models."""

__version__ = "0.1.0"
