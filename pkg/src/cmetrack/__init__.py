"""Compact memory embedding and deformable feature learning for synthetic tracking."""

__version__ = "0.1.0"
