"""Desk-scale open zero-shot learning benchmark engine."""

__version__ = "0.1.0"
