"""Synthetic scenario generation."""

from .generator import field_model, make_scenario

__all__ = ["make_scenario", "field_model"]
