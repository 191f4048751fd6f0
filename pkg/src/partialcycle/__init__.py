"""Self-supervised partial cycle-consistency for multi-view matching."""

__version__ = "0.1.0"
