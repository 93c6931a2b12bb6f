"""Drift lifecycle engine for hierarchical retail demand forecasting."""

__version__ = "0.1.0"
