"""Cluster-head detection in hierarchical UAV swarms."""

__version__ = "0.1.0"
