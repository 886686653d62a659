"""Forward pass, loss, Adam and the seeded training loop."""
import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.nn import functional as F

from roadscope.config.settings import TrainConfig
from roadscope.core.concurrency import ordered_map
from roadscope.core.exceptions import (
    EmptyResult,
    LabelOutOfRange,
    NonFiniteGradient,
    RoadscopeError,
    ShapeMismatch,
)
from roadscope.core.rng import derive_rng
from roadscope.dataset.manifest import ManifestEntry
from roadscope.nn.model import N_CLASSES, RoadNet, weights_digest

logger = structlog.get_logger(__name__)

PROB_FLOOR = 1e-7

# (entry, manifest line) -> model input tensor
InputLoader = Callable[[ManifestEntry, int], torch.Tensor]


def downscale_area(pixels: np.ndarray, size: int) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, size, size) float32 in [0, 1] by area averaging."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeMismatch("tile pixels", "(H, W, 3)", pixels.shape)
    x = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).to(torch.float32) / 255.0
    if x.shape[1:] == (size, size):
        return x.contiguous()
    return F.interpolate(x.unsqueeze(0), size=(size, size), mode="area").squeeze(0)


def forward(model: RoadNet, batch: torch.Tensor) -> torch.Tensor:
    """Class probabilities for a (N, ...) batch; no autograd graph is kept."""
    with torch.no_grad():
        return model(batch)


def _check_labels(labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    bad = labels[(labels < 0) | (labels >= N_CLASSES)]
    if bad.numel():
        raise LabelOutOfRange(int(bad[0]), N_CLASSES)
    return labels


def cross_entropy(probs: torch.Tensor, labels) -> Tuple[float, torch.Tensor]:
    """Mean clipped negative log-likelihood and its gradient wrt the logits."""
    labels = _check_labels(labels)
    probs = probs.detach()
    n = probs.shape[0]
    picked = probs[torch.arange(n), labels].clamp(PROB_FLOOR, 1.0)
    loss = float(-torch.log(picked.to(torch.float64)).mean())
    onehot = F.one_hot(labels, N_CLASSES).to(probs.dtype)
    return loss, (probs - onehot) / n


class AdamState(BaseModel):
    """First and second moments per parameter plus the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: List[torch.Tensor]
    v: List[torch.Tensor]
    t: int = Field(default=0, ge=0)

    @classmethod
    def fresh(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    cfg: TrainConfig,
) -> Tuple[Sequence[torch.Tensor], AdamState]:
    """Bias-corrected Adam update, applied in place.

    A step whose gradients are all zero leaves parameters, moments and the
    step counter untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step", len(params), (len(grads), len(state.m)))
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeMismatch("adam_step gradient", tuple(p.shape), tuple(g.shape))
    if not any(bool(g.any()) for g in grads):
        return params, state
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            p.sub_(cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon))
    return params, state


def backward(model: RoadNet, batch: torch.Tensor, labels, step: Optional[int] = None) -> List[torch.Tensor]:
    """Gradients of the mean cross-entropy for every parameter, in order."""
    labels = _check_labels(labels)
    params = list(model.parameters())
    for p in params:
        p.grad = None
    loss = F.cross_entropy(model.logits(batch), labels)
    loss.backward()
    grads = []
    for (name, _), p in zip(model.named_parameters(), params):
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name, step)
        grads.append(g.detach().clone())
        p.grad = None
    return grads


class EpochRecord(BaseModel):
    epoch: int
    steps: int
    loss: float
    accuracy: float


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: RoadNet
    history: List[EpochRecord] = Field(default_factory=list)
    init_digest: str
    final_digest: str
    steps: int = 0
    seconds: float = 0.0


def load_inputs(
    entries: Sequence[ManifestEntry],
    loader: InputLoader,
    lines: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> torch.Tensor:
    """Stack loader outputs in entry order; decoding may run on a thread pool."""
    lines = list(lines) if lines is not None else list(range(2, len(entries) + 2))
    tensors = ordered_map(lambda pair: loader(*pair), list(zip(entries, lines)), threads)
    return torch.stack(tensors)


def labels_of(entries: Sequence[ManifestEntry]) -> torch.Tensor:
    return torch.tensor([e.road_class.index for e in entries], dtype=torch.long)


def _evaluate_fit(model: RoadNet, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> Tuple[float, float]:
    losses, correct = [], 0
    for start in range(0, x.shape[0], batch_size):
        probs = forward(model, x[start:start + batch_size])
        yb = y[start:start + batch_size]
        loss, _ = cross_entropy(probs, yb)
        losses.append(loss * yb.shape[0])
        correct += int((probs.argmax(dim=1) == yb).sum())
    return float(sum(losses) / x.shape[0]), correct / x.shape[0]


def train(
    model: RoadNet,
    entries: Sequence[ManifestEntry],
    cfg: TrainConfig,
    loader: Optional[InputLoader] = None,
    lines: Optional[Sequence[int]] = None,
    threads: int = 1,
    inputs: Optional[torch.Tensor] = None,
) -> TrainResult:
    """Train ``model`` in place on ``entries``.

    Deterministic for a fixed (seed, entry order, cfg): each epoch shuffles
    with its own seeded stream and reductions run single-threaded.
    """
    if not entries:
        raise EmptyResult("train", "training manifest has no entries")
    if inputs is None and loader is None:
        raise ValueError("train needs a loader or preloaded inputs")
    torch.set_num_threads(1)

    x = inputs if inputs is not None else load_inputs(entries, loader, lines, threads)
    if x.shape[0] != len(entries):
        raise ShapeMismatch("training inputs", len(entries), x.shape[0])
    y = labels_of(entries)
    result = TrainResult(model=model, init_digest=weights_digest(model), final_digest="")
    params = list(model.parameters())
    state = AdamState.fresh(params)
    started = time.monotonic()

    logger.info(
        "Training started",
        samples=len(entries),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        init_digest=result.init_digest,
    )
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, f"train/shuffle/{epoch}").permutation(len(entries))
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].astype(np.int64))
            try:
                grads = backward(model, x[idx], y[idx], step)
            except RoadscopeError as e:
                e.details.setdefault("step", step)
                e.details.setdefault("epoch", epoch)
                raise
            adam_step(params, grads, state, cfg)
            step += 1

        model.eval()
        loss, accuracy = _evaluate_fit(model, x, y, cfg.batch_size)
        result.history.append(EpochRecord(epoch=epoch, steps=step, loss=loss, accuracy=accuracy))
        logger.info("Epoch finished", epoch=epoch, step=step, loss=round(loss, 6), accuracy=round(accuracy, 4))

    model.eval()
    result.steps = step
    result.final_digest = weights_digest(model)
    result.seconds = time.monotonic() - started
    return result
