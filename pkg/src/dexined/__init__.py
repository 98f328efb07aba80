"""Dense extreme-inception edge detection in numpy."""

__version__ = "0.1.0"
