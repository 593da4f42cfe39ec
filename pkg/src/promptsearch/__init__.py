"""Desk-scale continual person search with a domain-incremental prompt pool."""

__version__ = "0.1.0"
