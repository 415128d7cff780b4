"""Adversarial attacks and defenses for a toy differentiable speech recognizer."""

__version__ = "0.1.0"
