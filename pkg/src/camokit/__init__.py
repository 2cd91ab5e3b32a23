"""Toolkit for training and evaluating adversarial camouflage patches on overhead imagery."""

__version__ = "0.1.0"
