"""Synthetic-glyph text spotting with learned geometric landmarks and graph feature fusion."""

__version__ = "0.1.0"
