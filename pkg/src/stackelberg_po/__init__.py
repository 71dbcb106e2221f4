"""Partially observed leader/follower LQ games: solvers, filters and Monte Carlo checks."""

__version__ = "0.1.0"
