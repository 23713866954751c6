"""Coordination of distributed generators and air-conditioner demand response on a feeder."""

__version__ = "0.1.0"
