"""Desk-scale translation stack built on a frozen causal LM encoder."""

__version__ = "0.1.0"
