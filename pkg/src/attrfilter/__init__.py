"""Attribute removal and manipulation for speaker embeddings."""

__version__ = "0.1.0"
