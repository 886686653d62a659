"""Tile sampling and dataset assembly."""
