"""Class activation maps for global-average-pooling networks.

For class c the map is the dense-layer-weighted sum of the final feature
maps, CAM_c(x, y) = sum_k w[c, k] * F_k(x, y). It is min-max normalized at
feature resolution and bilinearly upsampled to the tile.
"""
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import structlog
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict
from torch.nn import functional as F

from roadscope.core.exceptions import ArchitectureUnsupported, ShapeMismatch, SizeMismatch
from roadscope.ingest.models import ROAD_CLASSES, RoadClass
from roadscope.masking.maskgen import Mask
from roadscope.nn.model import RoadNet

logger = structlog.get_logger(__name__)


class CamHeatmap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    road_class: RoadClass
    grid: np.ndarray  # feature resolution, [0, 1]
    upsampled: np.ndarray  # tile resolution, [0, 1]


def _require_cam(model) -> RoadNet:
    if not isinstance(model, RoadNet) or not model.supports_cam:
        raise ArchitectureUnsupported("class activation maps need GlobalAvgPool -> Dense(3) -> Softmax")
    return model


def _as_batch(model: RoadNet, x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise ShapeMismatch("cam input", ("1",) + model.input_shape, tuple(x.shape))
    return x


def class_activation(model: RoadNet, x: torch.Tensor, road_class: Union[RoadClass, int]) -> torch.Tensor:
    """Unnormalized CAM at feature-map resolution, shape (h, w)."""
    model = _require_cam(model)
    index = road_class.index if isinstance(road_class, RoadClass) else int(road_class)
    with torch.no_grad():
        maps = model.feature_maps(_as_batch(model, x))[0]  # (K, h, w)
        weights = model.classifier.weight[index]  # (K,)
        return torch.einsum("k,khw->hw", weights, maps)


def normalize(grid: torch.Tensor) -> torch.Tensor:
    """Min-max scale to [0, 1]; a flat map becomes all zeros."""
    lo, hi = grid.min(), grid.max()
    if not bool(hi > lo):
        return torch.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def cam(
    model: RoadNet,
    x: torch.Tensor,
    road_class: Union[RoadClass, int],
    tile_size: Optional[int] = None,
) -> CamHeatmap:
    """Normalized CAM for one input, upsampled to ``tile_size`` (default: input size)."""
    road_class = road_class if isinstance(road_class, RoadClass) else RoadClass.from_index(int(road_class))
    grid = normalize(class_activation(model, x, road_class))
    size = tile_size or int(model.input_shape[-1])
    up = F.interpolate(grid[None, None], size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    up = up.clamp(0.0, 1.0)
    return CamHeatmap(road_class=road_class, grid=grid.cpu().numpy(), upsampled=up.cpu().numpy())


def cam_all_classes(model: RoadNet, x: torch.Tensor, tile_size: Optional[int] = None) -> Dict[str, CamHeatmap]:
    return {c.value: cam(model, x, c, tile_size) for c in ROAD_CLASSES}


def cam_locality(heatmap: Union[CamHeatmap, np.ndarray], mask: Union[Mask, np.ndarray]) -> float:
    """Share of heatmap mass on mask pixels; 0 for an all-zero heatmap."""
    values = heatmap.upsampled if isinstance(heatmap, CamHeatmap) else np.asarray(heatmap, dtype=np.float64)
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if values.shape != bits.shape:
        raise SizeMismatch("heatmap/mask", bits.shape, values.shape)
    total = float(values.sum(dtype=np.float64))
    if total <= 0.0:
        return 0.0
    inside = float(values[bits].sum(dtype=np.float64))
    return min(max(inside / total, 0.0), 1.0)


def save_heatmap_png(heatmap: CamHeatmap, path: Path) -> Path:
    """8-bit grayscale rendering of the upsampled map."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(heatmap.upsampled * 255.0).astype(np.uint8)).save(path, format="PNG")
    return path
