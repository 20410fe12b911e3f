"""Cluster-routed unpaired image translation with attention and dual-contrast discriminators."""

__version__ = "0.1.0"
