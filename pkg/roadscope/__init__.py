"""roadscope: crowd-sourced road quality classification tooling.

Vector ingestion, geo-referenced tile sampling, occlusion masks, a small
CNN stack and the masking / cross-domain / CAM diagnostic harnesses.
"""

__version__ = "0.1.0"
