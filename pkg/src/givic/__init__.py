"""Desk-scale generative implicit video codec."""

__version__ = "0.1.0"
