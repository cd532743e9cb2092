"""Calibration-token adaptation of a toy multi-view reconstruction transformer to fisheye inputs."""

__version__ = "0.1.0"
