"""Regime-conditioned diffusion generation of limit order book trajectories."""

__version__ = "0.1.0"
