"""Simulation of semantic communication for teams of embodied rescue devices."""

__version__ = "0.1.0"
