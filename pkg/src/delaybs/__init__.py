"""Backstepping and neural-operator control of transport PIDEs with spatially-varying delay."""

__version__ = "0.1.0"
