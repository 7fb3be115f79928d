"""Hierarchical compositional shape vocabulary: learning and multi-class detection."""

__version__ = "0.1.0"
