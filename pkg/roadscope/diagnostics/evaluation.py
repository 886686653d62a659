"""Test-set evaluation."""
from typing import Callable, List, Optional, Sequence

import numpy as np
import structlog
import torch
from pydantic import BaseModel, ConfigDict

from roadscope.dataset.manifest import ManifestEntry
from roadscope.diagnostics.metrics import ConfusionMatrix
from roadscope.nn.training import InputLoader, labels_of, load_inputs

logger = structlog.get_logger(__name__)

# (N, ...) inputs -> (N, 3) class probabilities
Predictor = Callable[[torch.Tensor], torch.Tensor]


class Evaluation(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    confusion: ConfusionMatrix
    predictions: List[int]
    probabilities: np.ndarray


def predict(predictor: Predictor, inputs: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunks.append(predictor(inputs[start:start + batch_size]).detach().cpu().numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, 3), dtype=np.float32)


def evaluate(
    predictor: Predictor,
    entries: Sequence[ManifestEntry],
    loader: InputLoader,
    lines: Optional[Sequence[int]] = None,
    threads: int = 1,
    batch_size: int = 64,
) -> Evaluation:
    """Argmax predictions for ``entries``; ties go to the lower class index."""
    if not entries:
        return Evaluation(confusion=ConfusionMatrix(), predictions=[], probabilities=np.zeros((0, 3)))
    inputs = load_inputs(entries, loader, lines, threads)
    probs = predict(predictor, inputs, batch_size)
    predicted = np.argmax(probs, axis=1).astype(int).tolist()
    truth = labels_of(entries).tolist()
    cm = ConfusionMatrix.from_pairs(truth, predicted)
    logger.info("Evaluation finished", n=len(entries), correct=int(np.trace(cm.array)))
    return Evaluation(confusion=cm, predictions=predicted, probabilities=probs)
