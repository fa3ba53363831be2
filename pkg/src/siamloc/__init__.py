"""Siamese descriptor networks for appearance-based localization with panoramic images."""

__version__ = "0.1.0"
