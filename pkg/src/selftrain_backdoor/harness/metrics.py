"""Standard accuracy (SA) and attack success rate (ASR)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..dataio import ImageDataset
from ..errors import ValidationError


@dataclass
class EvalResult:
    sa: float
    asr: float
    n_clean: int
    n_attack_eligible: int
    model_id: str = ""
    dataset_ids: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset_ids"] = list(self.dataset_ids)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalResult":
        d = json.loads(Path(path).read_text())
        d["dataset_ids"] = tuple(d.get("dataset_ids", ()))
        return cls(**d)


def standard_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValidationError("SA needs at least one clean test sample")
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def attack_success_rate(pred_poisoned: np.ndarray, original_labels: np.ndarray, target: int):
    """Fraction of stamped non-target-class samples predicted as ``target``.
    Returns ``(asr, eligible count)``."""
    pred_poisoned = np.asarray(pred_poisoned)
    eligible = np.asarray(original_labels) != target
    n = int(eligible.sum())
    if n == 0:
        raise ValidationError("no attack-eligible (non-target-class) poisoned samples")
    return float(np.mean(pred_poisoned[eligible] == target)), n


def eval_predictions(pred_clean, labels_clean, pred_poisoned, labels_poisoned, target,
                     model_id="", dataset_ids=()) -> EvalResult:
    asr, n_eligible = attack_success_rate(pred_poisoned, labels_poisoned, target)
    return EvalResult(standard_accuracy(pred_clean, labels_clean), asr, len(labels_clean),
                      n_eligible, model_id, tuple(dataset_ids))


def eval_model(model, test_clean: ImageDataset, test_poisoned: ImageDataset, target: int) -> EvalResult:
    from ..trainer import predict

    if test_clean.labels is None or test_poisoned.labels is None:
        raise ValidationError("evaluation sets must be labeled")
    pc, _ = predict(model, test_clean.images)
    pp, _ = predict(model, test_poisoned.images)
    return eval_predictions(pc, test_clean.labels, pp, test_poisoned.labels, target,
                            model_id=model.weights_digest()[:16],
                            dataset_ids=(test_clean.name, test_poisoned.name))


def evaluator(test_clean: ImageDataset, test_poisoned: ImageDataset, target: int):
    """Closure used by the self-training loops to log per-iteration metrics."""
    return lambda model: eval_model(model, test_clean, test_poisoned, target)
