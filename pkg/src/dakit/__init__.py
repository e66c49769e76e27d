"""Variational and ensemble-variational data assimilation for a 2D shallow-water tank."""

__version__ = "0.1.0"
