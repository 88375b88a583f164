"""Prompt-assisted visual geo-localization at desk scale."""

__version__ = "0.1.0"
