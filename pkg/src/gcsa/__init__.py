"""Generalized contextual similarity aggregation for retrieval re-ranking."""

__version__ = "0.1.0"
