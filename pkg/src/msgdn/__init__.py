"""MSGDN post-processing toolkit for codec-compressed images."""

__version__ = "0.1.0"
