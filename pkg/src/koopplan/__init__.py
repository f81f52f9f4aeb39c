"""Invertible-Koopman surrogates, sampling-based reachability, and
time-informed kinodynamic motion planning."""

from . import diku, geometry, nets, planner, reachability, systems

__all__ = ["systems", "nets", "diku", "geometry", "reachability", "planner"]
__version__ = "0.1.0"
