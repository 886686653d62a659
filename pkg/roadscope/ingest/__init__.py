"""Crowd-sourced road vector ingestion."""
