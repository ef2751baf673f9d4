"""Classification metrics, cross-entropy, and early-stopping bookkeeping."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from mrissl.dataset import ClassTaxonomy, TaxonomyMismatchError

logger = logging.getLogger(__name__)

CE_EPS = 1e-12
IMPROVEMENT_EPS = 1e-6


def cross_entropy(probabilities: torch.Tensor, labels: torch.Tensor, eps: float = CE_EPS) -> torch.Tensor:
    """Mean of ``-log p[true class]``; zero probabilities are clamped to ``eps``."""
    p_true = probabilities.gather(1, labels.long().view(-1, 1)).squeeze(1)
    if bool((p_true < eps).any()):
        logger.warning("true-class probability below %g clamped in cross-entropy", eps)
    return -torch.log(p_true.clamp_min(eps)).mean()


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    phase: str
    classes: list[str]
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class: dict[str, dict[str, float]]
    confusion: list[list[int]]
    loss_curve: Optional[dict[str, list[float]]] = None
    manifest: Optional[str] = None
    config_hash: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def confusion_matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def compute_metrics(
    predictions: Sequence[int],
    labels: Sequence[int],
    taxonomy: ClassTaxonomy,
    phase: str = "test",
) -> MetricsReport:
    """Accuracy plus weighted and macro precision / recall / F1.

    Per-class scores with an empty denominator are 0 (with a warning).
    Weighted averages use true-class support as weights.
    """
    y_pred = np.asarray(predictions, dtype=np.int64)
    y_true = np.asarray(labels, dtype=np.int64)
    if y_pred.shape != y_true.shape:
        raise ValueError("predictions and labels differ in length")
    k = len(taxonomy)
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise TaxonomyMismatchError(f"label index outside the {k}-class taxonomy")

    cm = confusion_matrix(y_true, y_pred, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)

    never_predicted = [taxonomy.classes[i] for i in range(k) if predicted[i] == 0 and support[i] > 0]
    if never_predicted:
        logger.warning("classes never predicted (precision set to 0): %s", ", ".join(never_predicted))

    total = support.sum()
    weights = support / total if total else np.zeros(k)
    present = (support > 0) | (predicted > 0)
    n_present = max(int(present.sum()), 1)

    def macro(v):
        return float(v[present].sum() / n_present)

    per_class = {
        c: {"precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i]), "support": int(support[i])}
        for i, c in enumerate(taxonomy.classes)
    }
    return MetricsReport(
        phase=phase,
        classes=list(taxonomy.classes),
        accuracy=float(tp.sum() / total) if total else 0.0,
        precision_weighted=float(weights @ precision),
        recall_weighted=float(weights @ recall),
        f1_weighted=float(weights @ f1),
        precision_macro=macro(precision),
        recall_macro=macro(recall),
        f1_macro=macro(f1),
        per_class=per_class,
        confusion=cm.tolist(),
    )


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = float("inf")
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    best_checkpoint: Optional[object] = None


def early_stop_step(
    state: EarlyStopState,
    val_loss: float,
    patience: int = 10,
    epoch: Optional[int] = None,
    checkpoint: Optional[object] = None,
    min_delta: float = IMPROVEMENT_EPS,
) -> tuple[EarlyStopState, str]:
    """Record one epoch's validation loss; returns the new state and ``"continue"`` or ``"stop"``.

    An epoch counts as an improvement only if it lowers the best loss by at
    least ``min_delta``.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    epoch = state.best_epoch + state.epochs_since_improvement + 1 if epoch is None else epoch
    if val_loss <= state.best_loss - min_delta:
        state = EarlyStopState(val_loss, epoch, 0, checkpoint)
    else:
        state = EarlyStopState(state.best_loss, state.best_epoch, state.epochs_since_improvement + 1,
                               state.best_checkpoint)
    return state, ("stop" if state.epochs_since_improvement >= patience else "continue")
