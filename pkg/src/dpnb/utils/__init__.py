"""Utility helpers for dpnb."""

from .seeding import SeedStreams

__all__ = ["SeedStreams"]
