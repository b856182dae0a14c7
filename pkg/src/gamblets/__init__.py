"""Operator-adapted multiresolution (gamblet) solvers for SPD linear systems."""

__version__ = "0.1.0"
