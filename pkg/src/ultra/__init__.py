"""Hierarchical navigation agents with meta-learned sub-policies and an adversarial task generator."""

__version__ = "0.1.0"
