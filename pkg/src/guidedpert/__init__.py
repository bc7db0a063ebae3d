"""Micro CNN engine with guided-perturbation test-time refinement."""

__version__ = "0.1.0"
