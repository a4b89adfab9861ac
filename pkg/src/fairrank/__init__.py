"""Fairness-aware single-tower news ranking with adversarial attribute debiasing."""

__version__ = "0.1.0"
