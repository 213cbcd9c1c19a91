"""Learned traversability costmaps for off-road ground vehicles."""

__version__ = "0.1.0"
