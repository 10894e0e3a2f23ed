"""Kernel exponential families fitted by doubly dual embedding."""

__version__ = "0.1.0"
