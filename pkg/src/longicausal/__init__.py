"""Causal effects of continuous time-varying exposures from longitudinal panels."""

__version__ = "0.1.0"
