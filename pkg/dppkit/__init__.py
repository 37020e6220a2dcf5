"""Command-line interface for training, evaluating and exporting pruned models."""

from .cli import main

__all__ = ["main"]
