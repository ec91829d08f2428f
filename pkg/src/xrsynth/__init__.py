"""Synthetic radiographs, lung masks and lung-structure enhancement from CT."""

__version__ = "0.1.0"
