"""Adversarial textures against toy object detectors, registered across views by homographies."""

__version__ = "0.1.0"
