"""Desk-scale eMRTD/eID card and inspection-system laboratory."""

__version__ = "0.1.0"
