"""Simulation and regret measurement for scalar linear control with an unknown control gain."""

__version__ = "0.1.0"
