"""Gaussian splatting with a participating water medium."""
__version__ = "0.1.0"
