"""Markerless micromanipulation toolkit: calibration, tracking and control in a synthetic microscope world."""

__version__ = "0.1.0"
