"""Chest X-ray abnormality detection and localization experiment harness."""

__version__ = "0.1.0"
