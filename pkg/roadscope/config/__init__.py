"""
Configuration for roadscope runs.
"""
