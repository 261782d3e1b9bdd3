"""Continual soft-prompt tuning engine with baselines, metrics, and harness."""

__version__ = "0.1.0"
