"""Simulation and stability analysis of feedback loops closed over lossy round-based wireless networks."""

__version__ = "0.1.0"
