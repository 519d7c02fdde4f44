"""Adaptive Kalman-Bucy filtering for partially observed linear systems with small noise."""

__version__ = "0.1.0"
