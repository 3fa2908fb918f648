"""Piecewise-stationary low-rank contextual bandit laboratory."""

__version__ = "0.1.0"
