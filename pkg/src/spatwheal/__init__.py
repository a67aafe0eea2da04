"""Allergy wheal detection on multi-illumination skin prick test stacks."""

__version__ = "0.1.0"
