"""Detect VR familiarity from dominant-hand keypad trajectories."""

__version__ = "0.1.0"
