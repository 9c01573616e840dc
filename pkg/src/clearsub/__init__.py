"""Desk-scale two-stage video subtitle removal on synthetic paired videos."""

__version__ = "0.1.0"
