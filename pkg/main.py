"""
roadscope - Main Entry Point

Road quality classification pipeline: OSM ingestion, tile sampling,
occlusion masks, small-CNN training and the masking, transfer and CAM
diagnostics.

Usage:
    python main.py --version
    python main.py synth --signal context --out ws
    python main.py mask-experiment --workspace ws
"""

import sys
from pathlib import Path

# Add project root to path
sys.path.append(str(Path(__file__).parent))

from roadscope.cli.main import main


if __name__ == "__main__":
    sys.exit(main())
