"""Diffusion value functions for graph-structured multi-agent MDPs."""

__version__ = "0.1.0"
