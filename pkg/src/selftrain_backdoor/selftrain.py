"""Iterative pseudo-labeling with strong augmentation on the labeled pool.

Each iteration pseudo-labels the pools with the current model (labeled-pool
images pass through the strong augmentation first), keeps the most confident
records per predicted class, and warm-starts the model on them. A fresh model
is finally trained from scratch on the last selection. Given labels are never
read after pretraining.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import augment
from .dataio import ImageDataset
from .errors import EmptyDatasetError, ValidationError
from .trainer import TrainConfig, TrainedModel, predict, save_checkpoint, train

log = logging.getLogger(__name__)

POOL_LABELED, POOL_UNLABELED = "L", "U"
SCOPES = ("U_only", "L_and_U")
TRACE_COLUMNS = ["iteration", "n_selected", "sa", "asr", "n_clean", "n_attack_eligible"]


@dataclass
class SelfTrainConfig:
    iterations: int = 4
    fraction_per_iter: float = 0.3
    strong_aug: Optional[augment.AugmentationSpec] = None
    pl_scope: str = "L_and_U"
    augment_labeled_only: bool = True
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=150))
    final: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300, lr_decay=[(100, 0.5), (200, 0.5)]))
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not (0 < self.fraction_per_iter <= 1):
            raise ValidationError("fraction_per_iter must be in (0, 1]")
        if self.pl_scope not in SCOPES:
            raise ValidationError(f"pl_scope must be one of {SCOPES}")
        if isinstance(self.strong_aug, str):
            self.strong_aug = None if self.strong_aug in ("", "none") else augment.parse(self.strong_aug)


@dataclass
class PseudoLabelTable:
    record_id: np.ndarray
    pool: np.ndarray
    source_index: np.ndarray
    label: np.ndarray
    confidence: np.ndarray
    iteration: int

    def __len__(self):
        return len(self.record_id)

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "pool", "source_index", "pseudo_label", "confidence", "iteration"])
            for row in zip(self.record_id, self.pool, self.source_index, self.label, self.confidence):
                w.writerow([int(row[0]), row[1], int(row[2]), int(row[3]), repr(float(row[4])), self.iteration])

    @classmethod
    def load(cls, path) -> "PseudoLabelTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            np.array([int(r["record_id"]) for r in rows], np.int64),
            np.array([r["pool"] for r in rows]),
            np.array([int(r["source_index"]) for r in rows], np.int64),
            np.array([int(r["pseudo_label"]) for r in rows], np.int64),
            np.array([float(r["confidence"]) for r in rows], np.float32),
            int(rows[0]["iteration"]) if rows else 0,
        )


@dataclass
class SelectedSet:
    record_id: np.ndarray
    label: np.ndarray
    quota: int

    def __len__(self):
        return len(self.record_id)

    def per_class(self, class_count: int) -> np.ndarray:
        return np.bincount(self.label, minlength=class_count)

    def save(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "assigned_label"])
            for rid, lab in zip(self.record_id, self.label):
                w.writerow([int(rid), int(lab)])


@dataclass
class SelfTrainResult:
    iteration_models: list
    final: TrainedModel
    trace: list
    tables: list
    selections: list


def _images(pool) -> np.ndarray:
    return pool.images if isinstance(pool, ImageDataset) else np.asarray(pool, dtype=np.float32)


def aug_seed(seed: int, iteration: int, pool: str) -> int:
    return int(np.random.SeedSequence([seed, iteration, ord(pool)]).generate_state(1)[0])


def make_table(labels, confidences, pools, iteration) -> PseudoLabelTable:
    """Assemble a table from per-pool predictions; record ids run over the labeled
    pool first, then the unlabeled pool."""
    ids, pool_col, src, lab, conf = [], [], [], [], []
    offset = {POOL_LABELED: 0, POOL_UNLABELED: pools.get("n_labeled", 0)}
    for name in (POOL_LABELED, POOL_UNLABELED):
        if name not in labels:
            continue
        n = len(labels[name])
        ids.append(offset[name] + np.arange(n))
        pool_col.append(np.full(n, name))
        src.append(np.arange(n))
        lab.append(np.asarray(labels[name], np.int64))
        conf.append(np.asarray(confidences[name], np.float32))
    return PseudoLabelTable(np.concatenate(ids).astype(np.int64), np.concatenate(pool_col),
                            np.concatenate(src).astype(np.int64), np.concatenate(lab),
                            np.concatenate(conf), iteration)


def pseudo_label(model: TrainedModel, labeled, unlabeled, cfg: SelfTrainConfig,
                 iteration: int = 1) -> PseudoLabelTable:
    """Forward the pools through ``model``. Labeled-pool images are strongly augmented
    first (both pools when ``augment_labeled_only`` is off); labels are not consulted."""
    x_l, x_u = _images(labeled), _images(unlabeled)
    scopes = [POOL_UNLABELED] if cfg.pl_scope == "U_only" else [POOL_LABELED, POOL_UNLABELED]
    if sum(len(x) for x, p in ((x_l, POOL_LABELED), (x_u, POOL_UNLABELED)) if p in scopes) == 0:
        raise EmptyDatasetError("nothing to pseudo-label")
    labels, confs = {}, {}
    for name, x in ((POOL_LABELED, x_l), (POOL_UNLABELED, x_u)):
        if name not in scopes:
            continue
        use_aug = cfg.strong_aug is not None and (name == POOL_LABELED or not cfg.augment_labeled_only)
        if use_aug and len(x):
            x = augment.apply_batch(cfg.strong_aug, x, aug_seed(cfg.seed, iteration, name))
        labels[name], confs[name] = predict(model, x)
    return make_table(labels, confs, {"n_labeled": len(x_l)}, iteration)


def class_quota(k: float, n: int, pool_size: int, class_count: int) -> int:
    """floor(k * n * |pool| / C), computed exactly for decimal k."""
    frac = Fraction(str(k)) if isinstance(k, float) else Fraction(k)
    return math.floor(frac * n * pool_size / class_count)


def select_confident(table: PseudoLabelTable, n: int, k: float, class_count: int,
                     pool_size: Optional[int] = None) -> SelectedSet:
    """Per pseudo-class, the ``quota`` most confident records (ties by record id)."""
    pool_size = len(table) if pool_size is None else pool_size
    quota = class_quota(k, n, pool_size, class_count)
    ids, labs = [], []
    for c in range(class_count):
        members = np.flatnonzero(table.label == c)
        if not len(members) or quota == 0:
            continue
        order = np.lexsort((table.record_id[members], -table.confidence[members].astype(np.float64)))
        chosen = members[order[:quota]]
        ids.append(table.record_id[chosen])
        labs.append(np.full(len(chosen), c, np.int64))
    if not ids:
        return SelectedSet(np.zeros(0, np.int64), np.zeros(0, np.int64), quota)
    return SelectedSet(np.concatenate(ids), np.concatenate(labs), quota)


def gather(selection: SelectedSet, labeled, unlabeled, class_count: int, name: str) -> ImageDataset:
    """Training set of original (unaugmented) images with their assigned pseudo-labels."""
    x_l, x_u = _images(labeled), _images(unlabeled)
    pool = np.concatenate([x_l, x_u]) if len(x_l) and len(x_u) else (x_l if len(x_l) else x_u)
    return ImageDataset(pool[selection.record_id], selection.label, class_count, name)


def _trace_row(iteration, n_selected, result) -> dict:
    row = {"iteration": str(iteration), "n_selected": n_selected, "sa": "", "asr": "",
           "n_clean": "", "n_attack_eligible": ""}
    if result is not None:
        row.update(sa=result.sa, asr=result.asr, n_clean=result.n_clean,
                   n_attack_eligible=result.n_attack_eligible)
    return row


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_selftrain(pretrained: TrainedModel, labeled, unlabeled, cfg: SelfTrainConfig,
                  evaluate: Optional[Callable] = None, run_dir=None,
                  first_labeler: Optional[Callable[[], PseudoLabelTable]] = None) -> SelfTrainResult:
    """Run the self-training loop from a model pretrained on the (poisoned) labeled pool.

    ``labeled`` may be an ImageDataset (its labels are ignored) or an image array.
    ``evaluate(model)`` returning an EvalResult is called after pretraining, after
    every iteration and on the final model. ``first_labeler`` replaces the model's
    pseudo-labels in iteration 1 (used by the clustering variant).
    """
    class_count = pretrained.spec.class_count
    run_dir = Path(run_dir) if run_dir is not None else None
    model = pretrained
    trace = [_trace_row(0, 0, evaluate(model) if evaluate else None)]
    models, tables, selections = [], [], []
    selection = None
    for n in range(1, cfg.iterations + 1):
        if n == 1 and first_labeler is not None:
            table = first_labeler()
        else:
            table = pseudo_label(model, labeled, unlabeled, cfg, iteration=n)
        selection = select_confident(table, n, cfg.fraction_per_iter, class_count)
        log.info("iteration %d: quota %d/class, %d selected", n, selection.quota, len(selection))
        if len(selection) == 0:
            raise EmptyDatasetError(f"iteration {n} selected no records")
        ds_n = gather(selection, labeled, unlabeled, class_count, f"selected-iter{n}")
        model = train(ds_n, pretrained.spec, replace(cfg.retrain, seed=cfg.retrain.seed + n), init=model)
        result = evaluate(model) if evaluate else None
        trace.append(_trace_row(n, len(selection), result))
        models.append(model)
        tables.append(table)
        selections.append(selection)
        if run_dir is not None:
            d = run_dir / f"iter_{n}"
            d.mkdir(parents=True, exist_ok=True)
            table.save(d / "pseudolabels.csv")
            selection.save(d / "selected.csv")
            save_checkpoint(model, d / "model.ckpt")
    ds_final = gather(selection, labeled, unlabeled, class_count, "selected-final")
    final = train(ds_final, pretrained.spec, cfg.final)
    trace.append(_trace_row("final", len(selection), evaluate(final) if evaluate else None))
    if run_dir is not None:
        (run_dir / "final").mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, run_dir / "final" / "model.ckpt")
        write_trace(trace, run_dir / "trace.csv")
    return SelfTrainResult(models, final, trace, tables, selections)
