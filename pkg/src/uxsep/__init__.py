"""Causal time-domain speech separation: model, trainer, data synthesis, CLI."""

__version__ = "0.1.0"
