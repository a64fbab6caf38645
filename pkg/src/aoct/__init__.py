"""Airway geometry from anatomic-OCT pull-back scans via neural signed distance fields."""

__version__ = "0.1.0"
