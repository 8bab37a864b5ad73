"""Equivariant coordinate-system ensembles for point-cloud models."""

__version__ = "0.1.0"
