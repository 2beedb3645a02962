"""Forecast adherence to guided internet-delivered CBT from login/logout timestamps."""

__version__ = "0.1.0"
