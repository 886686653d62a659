"""Synthetic ground-truth scenes."""
