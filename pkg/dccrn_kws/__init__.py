"""Desk-scale multi-task speech enhancement and keyword spotting."""

__version__ = "0.1.0"
