"""Partition-parallel training and evaluation of mesh graph networks."""

__version__ = "0.1.0"
