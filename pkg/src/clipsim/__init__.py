"""Clip-level near-duplicate video retrieval and similarity learning."""

__version__ = "0.1.0"
