"""Simulation toolkit for stealthy sensor attacks on nonlinear feedback loops."""

__version__ = "0.1.0"
