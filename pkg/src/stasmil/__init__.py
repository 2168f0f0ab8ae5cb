"""MIL engine for STAS prediction on whole-slide feature bags."""

__version__ = "0.1.0"
