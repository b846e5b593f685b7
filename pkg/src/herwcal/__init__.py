"""Certifiably optimal hand-eye robot-world calibration for many sensors and targets."""

__version__ = "0.1.0"
