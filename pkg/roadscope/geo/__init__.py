"""Coordinate types, local projection and geotransform math."""
