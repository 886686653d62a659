"""Metrics, experiment runners and class activation maps."""
