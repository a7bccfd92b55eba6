"""Inertial-magnetic navigation and SLAM with a magnetometer array."""

__version__ = "0.1.0"
