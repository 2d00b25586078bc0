"""Continual learning for drift-compensated bending-angle regression from a soft strain sensor."""

__version__ = "0.1.0"
