"""Sequence-level variational motion prior for human motion capture."""

__version__ = "0.1.0"
