"""Hypernetwork-generated low-rank adapters for a frozen toy transformer."""

__version__ = "0.1.0"
