"""Pseudospectral plasma-vacuum interface simulator on a periodic slab."""

__version__ = "0.1.0"
