"""Tile decoding for training and evaluation.

Masks are applied at full tile resolution, before area downscaling, so the
occluded pixels stay exactly zero after normalization.
"""
import threading
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import structlog
import torch

from roadscope.core.exceptions import RoadscopeError, TileLoadError
from roadscope.dataset.manifest import Manifest, ManifestEntry
from roadscope.masking.maskgen import MaskMode, apply_mask, load_mask_png
from roadscope.nn.training import downscale_area
from roadscope.raster.store import load_rgb_png

logger = structlog.get_logger(__name__)


class TileLoader:
    """Callable ``(entry, line) -> (3, size, size)`` tensor for one masking mode.

    Args:
        resolve: maps a manifest-relative path to a filesystem path
        mask_mode: which pixels survive before the tile reaches the model
        input_size: side of the model input in pixels
        cache: keep decoded tensors in memory, keyed by tile path
    """

    def __init__(
        self,
        resolve: Callable[[str], Path],
        mask_mode: MaskMode = MaskMode.NONE,
        input_size: int = 128,
        cache: bool = True,
    ):
        self.resolve = resolve
        self.mask_mode = MaskMode(mask_mode)
        self.input_size = input_size
        self._cache: Optional[Dict[Tuple[str, Optional[str]], torch.Tensor]] = {} if cache else None
        self._lock = threading.Lock()

    @classmethod
    def for_manifest(cls, manifest: Manifest, mask_mode: MaskMode = MaskMode.NONE, input_size: int = 128) -> "TileLoader":
        return cls(manifest.resolve, mask_mode, input_size)

    def pixels(self, entry: ManifestEntry, line: Optional[int] = None) -> np.ndarray:
        """Full-resolution tile with the masking mode applied."""
        tile_path = self.resolve(entry.tile_path)
        try:
            pixels = load_rgb_png(tile_path)
        except (OSError, ValueError) as e:
            raise TileLoadError(str(tile_path), line, f"cannot read tile: {e}")

        if self.mask_mode is MaskMode.NONE:
            return pixels
        if entry.mask_path is None:
            raise TileLoadError(entry.tile_path, line, f"mask_mode {self.mask_mode.value} needs a mask_path")
        mask_path = self.resolve(entry.mask_path)
        try:
            mask = load_mask_png(mask_path)
        except (OSError, ValueError) as e:
            raise TileLoadError(str(mask_path), line, f"cannot read mask: {e}")
        try:
            return apply_mask(pixels, mask, self.mask_mode)
        except RoadscopeError as e:
            raise TileLoadError(entry.tile_path, line, e.message)

    def __call__(self, entry: ManifestEntry, line: Optional[int] = None) -> torch.Tensor:
        key = (entry.tile_path, entry.mask_path if self.mask_mode is not MaskMode.NONE else None)
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(key)
            if hit is not None:
                return hit
        x = downscale_area(self.pixels(entry, line), self.input_size)
        if self._cache is not None:
            with self._lock:
                self._cache[key] = x
        return x
