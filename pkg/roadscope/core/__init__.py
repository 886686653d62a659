"""
Core components shared by every roadscope module.
"""
