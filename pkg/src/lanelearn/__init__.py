"""Personalized automated lane changes learned from driver takeover interventions."""

__version__ = "0.1.0"
