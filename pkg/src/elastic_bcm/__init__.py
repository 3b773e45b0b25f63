"""Boundary-control density reconstruction for the time-domain elastic wave system."""

__version__ = "0.1.0"
