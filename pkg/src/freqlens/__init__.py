"""Frequency-domain analysis of adversarial examples on desk-scale classifiers."""

__version__ = "0.1.0"
