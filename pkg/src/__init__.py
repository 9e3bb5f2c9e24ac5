"""Restored Depth - monocular depth estimation as feature restoration"""

__version__ = "0.1.0"
