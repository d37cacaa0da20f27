"""Calibration and allocation toolkit for parametric neural scaling laws."""

__version__ = "0.1.0"
