"""Dimension-splitting solver for rotating flow in bladed passages."""

__version__ = "0.1.0"
