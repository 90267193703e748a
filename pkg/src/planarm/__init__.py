"""Viability-preserving passive torque control lab for planar manipulators."""

__version__ = "0.1.0"
