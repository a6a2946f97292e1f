"""Desk-scale robust adversarial model-based offline RL."""

__version__ = "0.1.0"
