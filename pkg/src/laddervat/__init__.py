"""Ladder networks, virtual adversarial training and their fusions, in numpy."""

__version__ = "0.1.0"
