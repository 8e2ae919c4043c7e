"""Petri-net job-shop simulation with dispatching-rule hyper-heuristics."""
__version__ = "0.1.0"
