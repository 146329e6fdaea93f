"""Adaptive superpixel coding: token grouping by graph connectivity inside a ViT."""

__version__ = "0.1.0"
