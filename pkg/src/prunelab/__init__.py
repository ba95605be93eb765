"""Magnitude-pruning laboratory over a small CTC sequence model."""

__version__ = "0.1.0"
