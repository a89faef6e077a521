"""Ensembles of off-policy RL agents for electricity-control simulators."""

__version__ = "0.1.0"
