"""Hierarchical mixture of LoRA and router experts for preference-conditioned policies."""

__version__ = "0.1.0"
