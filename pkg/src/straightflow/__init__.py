"""Straight conditional-transport flow matching on a synthetic try-on task."""

__version__ = "0.1.0"
