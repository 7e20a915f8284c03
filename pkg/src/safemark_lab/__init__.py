"""Desk-scale lab for watermark-preserving image-editor fine-tuning."""

__version__ = "0.1.0"
