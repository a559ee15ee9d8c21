"""Fusion of overlapping 3D point-distribution models."""
