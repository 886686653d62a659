"""Layer definitions and the torch network built from them.

A ``ModelSpec`` is an ordered list of layer specs. ``build_model`` shape-checks
the list against an input shape, instantiates the torch modules and draws the
initial weights from the run seed. Networks over images must end with
GlobalAvgPool -> Dense(3) -> Softmax so class activation maps can be read off
the final feature maps.
"""
import hashlib
import math
from typing import Annotated, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torch.nn import functional as F

from roadscope.core.exceptions import ModelSpecError, NonFiniteActivation, ShapeMismatch
from roadscope.core.rng import derive_seed

logger = structlog.get_logger(__name__)

N_CLASSES = 3


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


class _LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Conv2DSpec(_LayerSpec):
    type: Literal["conv2d"] = "conv2d"
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    out_channels: int = Field(gt=0)


class DSConvSpec(_LayerSpec):
    type: Literal["ds_conv"] = "ds_conv"
    kernel: int = Field(gt=0)
    stride: int = Field(default=1, gt=0)
    padding: int = Field(default=0, ge=0)
    out_channels: int = Field(gt=0)


class ReLUSpec(_LayerSpec):
    type: Literal["relu"] = "relu"


class MaxPoolSpec(_LayerSpec):
    type: Literal["max_pool"] = "max_pool"
    kernel: int = Field(gt=0)
    stride: int = Field(gt=0)


class GlobalAvgPoolSpec(_LayerSpec):
    type: Literal["global_avg_pool"] = "global_avg_pool"


class DenseSpec(_LayerSpec):
    type: Literal["dense"] = "dense"
    out: int = Field(gt=0)


class SoftmaxSpec(_LayerSpec):
    type: Literal["softmax"] = "softmax"


LayerSpec = Annotated[
    Union[Conv2DSpec, DSConvSpec, ReLUSpec, MaxPoolSpec, GlobalAvgPoolSpec, DenseSpec, SoftmaxSpec],
    Field(discriminator="type"),
]


class ModelSpec(BaseModel):
    """Ordered layer list plus the input shape it was checked against."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "custom"
    layers: List[LayerSpec]

    def has_cam_head(self) -> bool:
        tail = self.layers[-3:]
        return (
            len(tail) == 3
            and isinstance(tail[0], GlobalAvgPoolSpec)
            and isinstance(tail[1], DenseSpec)
            and tail[1].out == N_CLASSES
            and isinstance(tail[2], SoftmaxSpec)
        )


def tiny_road_net() -> ModelSpec:
    """Strided 3x3 stem followed by three depthwise separable stages."""
    return ModelSpec(
        name="tiny_road_net",
        layers=[
            Conv2DSpec(kernel=3, stride=2, padding=1, out_channels=16),
            ReLUSpec(),
            DSConvSpec(kernel=3, stride=2, padding=1, out_channels=32),
            ReLUSpec(),
            DSConvSpec(kernel=3, stride=2, padding=1, out_channels=64),
            ReLUSpec(),
            DSConvSpec(kernel=3, stride=2, padding=1, out_channels=128),
            ReLUSpec(),
            GlobalAvgPoolSpec(),
            DenseSpec(out=N_CLASSES),
            SoftmaxSpec(),
        ],
    )


def plain_conv() -> ModelSpec:
    """Same topology as ``tiny_road_net`` with ordinary convolutions."""
    return ModelSpec(
        name="plain_conv",
        layers=[
            Conv2DSpec(kernel=3, stride=2, padding=1, out_channels=16),
            ReLUSpec(),
            Conv2DSpec(kernel=3, stride=2, padding=1, out_channels=32),
            ReLUSpec(),
            Conv2DSpec(kernel=3, stride=2, padding=1, out_channels=64),
            ReLUSpec(),
            Conv2DSpec(kernel=3, stride=2, padding=1, out_channels=128),
            ReLUSpec(),
            GlobalAvgPoolSpec(),
            DenseSpec(out=N_CLASSES),
            SoftmaxSpec(),
        ],
    )


def embedding_head(hidden: int = 64) -> ModelSpec:
    """Feed-forward head over backbone embeddings."""
    return ModelSpec(
        name="embedding_head",
        layers=[DenseSpec(out=hidden), ReLUSpec(), DenseSpec(out=N_CLASSES), SoftmaxSpec()],
    )


ARCHITECTURES = {"tiny_road_net": tiny_road_net, "plain_conv": plain_conv}


def architecture(name: str) -> ModelSpec:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ModelSpecError(f"unknown architecture {name!r}", details={"known": sorted(ARCHITECTURES)})


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class DepthwiseSeparableConv2d(nn.Module):
    """Per-channel k x k convolution followed by a 1 x 1 pointwise mix."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels,
            in_channels,
            kernel_size,
            stride=stride,
            padding=padding,
            groups=in_channels,
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


class GlobalAvgPool(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))


Shape = Tuple[int, ...]


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _build_layer(layer, shape: Shape, index: int) -> Tuple[Optional[nn.Module], Shape]:
    """Module for one spec plus the output shape; None for the final softmax."""
    where = f"layer {index} ({layer.type})"
    if isinstance(layer, (Conv2DSpec, DSConvSpec, MaxPoolSpec)):
        if len(shape) != 3:
            raise ShapeMismatch(where, "(C, H, W)", shape)
        c, h, w = shape
        padding = getattr(layer, "padding", 0)
        oh, ow = (_conv_out(s, layer.kernel, layer.stride, padding) for s in (h, w))
        if oh < 1 or ow < 1:
            raise ShapeMismatch(where, f"spatial size >= {layer.kernel}", shape)
        if isinstance(layer, MaxPoolSpec):
            return nn.MaxPool2d(layer.kernel, layer.stride), (c, oh, ow)
        if isinstance(layer, Conv2DSpec):
            return nn.Conv2d(c, layer.out_channels, layer.kernel, layer.stride, layer.padding), (layer.out_channels, oh, ow)
        k, out = layer.kernel, layer.out_channels
        if k > 1 and out > 1 and not k * k * c + c * out < k * k * c * out:
            raise ModelSpecError(f"{where}: separable conv is not smaller than the dense equivalent")
        return DepthwiseSeparableConv2d(c, out, k, layer.stride, layer.padding), (out, oh, ow)
    if isinstance(layer, ReLUSpec):
        return nn.ReLU(), shape
    if isinstance(layer, GlobalAvgPoolSpec):
        if len(shape) != 3:
            raise ShapeMismatch(where, "(C, H, W)", shape)
        return GlobalAvgPool(), (shape[0],)
    if isinstance(layer, DenseSpec):
        if len(shape) != 1:
            raise ShapeMismatch(where, "(features,)", shape)
        return nn.Linear(shape[0], layer.out), (layer.out,)
    if isinstance(layer, SoftmaxSpec):
        return None, shape
    raise ModelSpecError(f"{where}: unsupported layer")


class RoadNet(nn.Module):
    """Sequential network whose forward pass returns class probabilities.

    ``features`` holds every layer before global average pooling (empty for
    vector inputs); ``head`` holds the layers after it up to the logits.
    """

    def __init__(self, spec: ModelSpec, input_shape: Sequence[int]):
        super().__init__()
        self.spec = spec
        self.input_shape: Shape = tuple(int(s) for s in input_shape)
        self._validate()

        shape = self.input_shape
        features: List[nn.Module] = []
        head: List[nn.Module] = []
        self.pooled = False
        for i, layer in enumerate(self.spec.layers):
            module, shape = _build_layer(layer, shape, i)
            if module is None:
                continue
            if isinstance(module, GlobalAvgPool):
                self.pooled = True
                continue
            (head if self.pooled or len(self.input_shape) == 1 else features).append(module)
        self.features = nn.Sequential(*features)
        self.head = nn.Sequential(*head)

    def _validate(self) -> None:
        layers = self.spec.layers
        if not layers or not isinstance(layers[-1], SoftmaxSpec):
            raise ModelSpecError("model must end with Softmax")
        if len(layers) < 2 or not isinstance(layers[-2], DenseSpec) or layers[-2].out != N_CLASSES:
            raise ModelSpecError(f"model must end with Dense({N_CLASSES}) -> Softmax")
        if any(isinstance(l, SoftmaxSpec) for l in layers[:-1]):
            raise ModelSpecError("Softmax is only allowed as the final layer")
        if len(self.input_shape) == 3 and not self.spec.has_cam_head():
            raise ModelSpecError("image models must end with GlobalAvgPool -> Dense(3) -> Softmax")
        if len(self.input_shape) not in (1, 3):
            raise ShapeMismatch("input", "(C, H, W) or (D,)", self.input_shape)

    @property
    def supports_cam(self) -> bool:
        return len(self.input_shape) == 3 and self.spec.has_cam_head() and len(self.head) == 1

    def _check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch("forward input", ("N",) + self.input_shape, tuple(x.shape))

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Final convolutional feature maps, shape (N, K, h, w)."""
        self._check_input(x)
        for i, module in enumerate(self.features):
            x = module(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation(f"features.{i}")
        return x

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = self.feature_maps(x)
        if self.pooled:
            x = x.mean(dim=(2, 3))
        for i, module in enumerate(self.head):
            x = module(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation(f"head.{i}")
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    @property
    def classifier(self) -> nn.Linear:
        return self.head[-1]


# ---------------------------------------------------------------------------
# Construction and weights
# ---------------------------------------------------------------------------


def init_weights(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, drawn in parameter order."""
    generator = torch.Generator().manual_seed(derive_seed(seed, "nn/init"))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                fan_in = param[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                param.uniform_(-bound, bound, generator=generator)


def build_model(spec: ModelSpec, input_shape: Sequence[int], seed: int = 0) -> RoadNet:
    model = RoadNet(spec, input_shape)
    init_weights(model, seed)
    logger.debug(
        "Model built",
        name=spec.name,
        input_shape=list(model.input_shape),
        parameters=sum(p.numel() for p in model.parameters()),
    )
    return model


def parameter_blob(model: nn.Module) -> bytes:
    """Little-endian f32 bytes of every parameter in state-dict order."""
    return b"".join(
        t.detach().cpu().numpy().astype("<f4", copy=False).tobytes() for t in model.state_dict().values()
    )


def weights_digest(model: nn.Module) -> str:
    return hashlib.sha256(parameter_blob(model)).hexdigest()


def load_parameter_blob(model: nn.Module, blob: bytes) -> None:
    offset = 0
    state = model.state_dict()
    for key, tensor in state.items():
        n = tensor.numel() * 4
        if offset + n > len(blob):
            raise ShapeMismatch(f"parameter {key}", n, len(blob) - offset)
        values = np.frombuffer(blob, dtype="<f4", count=tensor.numel(), offset=offset)
        state[key] = torch.from_numpy(values.astype(np.float32).reshape(tuple(tensor.shape)))
        offset += n
    if offset != len(blob):
        raise ShapeMismatch("parameter blob", offset, len(blob))
    model.load_state_dict(state)
