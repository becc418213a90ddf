"""Exact-oracle laboratory for policy-gradient baselines."""

__version__ = "0.1.0"
