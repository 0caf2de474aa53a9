"""Span-based extraction of radiological findings and normalized anatomy."""

__version__ = "0.1.0"
