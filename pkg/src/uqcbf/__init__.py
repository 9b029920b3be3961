"""Uncertainty-aware learning and CBF-SOCP safe control at desk scale."""

__version__ = "0.1.0"
