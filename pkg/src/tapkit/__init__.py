"""Temporal acoustic parameter (TAP) toolkit for speech enhancement."""

__version__ = "0.1.0"
