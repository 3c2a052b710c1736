"""Compile OpenStreetMap JSON into conditioning data for controllable satellite image synthesis."""

__version__ = "0.1.0"
