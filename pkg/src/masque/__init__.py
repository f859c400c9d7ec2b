"""Localized adversarial makeup for face-recognition dodging, at desk scale."""

__version__ = "0.1.0"
