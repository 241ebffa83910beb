"""Simulation and numerics for self-exciting infinite-server queueing networks."""
__version__ = "0.1.0"
