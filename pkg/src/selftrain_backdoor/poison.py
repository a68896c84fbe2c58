"""Attacker side: trigger stamping, BadNet and clean-label poisoning.

The poisoned index list is bookkeeping for evaluation and reporting. Defense
code paths receive only the poisoned images (and, for the labeled pool, the
possibly flipped labels), never a ``PoisonedDataset``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import ImageDataset, round_half_away
from .errors import InputError, ValidationError

POSITIONS = ("lower_right", "lower_left", "upper_right", "upper_left")
TRIGGER_KINDS = ("gray_checker", "rgb_patch")
ATTACK_KINDS = ("badnet", "clean_label")


@dataclass
class TriggerSpec:
    pattern: np.ndarray
    kind: str = "gray_checker"
    position: str = "lower_right"
    seed: Optional[int] = None

    def __post_init__(self):
        pattern = np.asarray(self.pattern, dtype=np.float32)
        if pattern.ndim != 3 or pattern.shape[0] != pattern.shape[1] or pattern.shape[0] == 0:
            raise ValidationError(f"trigger pattern must be a non-empty s x s x C array, got {pattern.shape}")
        if pattern.min() < 0 or pattern.max() > 1:
            raise ValidationError("trigger pattern values must lie in [0, 1]")
        if self.kind not in TRIGGER_KINDS:
            raise ValidationError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "gray_checker" and not np.all(pattern == pattern[..., :1]):
            raise ValidationError("gray_checker pattern must have equal channels")
        if self.position not in POSITIONS:
            raise ValidationError(f"unknown trigger position {self.position!r}")
        self.pattern = pattern

    @property
    def size(self) -> int:
        return self.pattern.shape[0]

    def window(self, height: int, width: int):
        s = self.size
        if s > min(height, width):
            raise ValidationError(f"{s}x{s} trigger does not fit a {height}x{width} image")
        rows = slice(height - s, height) if self.position.startswith("lower") else slice(0, s)
        cols = slice(width - s, width) if self.position.endswith("right") else slice(0, s)
        return rows, cols

    def to_dict(self) -> dict:
        return {"kind": self.kind, "position": self.position, "seed": self.seed,
                "size": self.size, "pattern": self.pattern.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(np.asarray(d["pattern"], np.float32), d["kind"], d["position"], d.get("seed"))


def make_trigger(kind: str = "gray_checker", size: int = 5, channels: int = 3,
                 position: str = "lower_right", seed: int = 0) -> TriggerSpec:
    """Gray checkerboard of alternating 1/0 cells (1 at the window's top-left), or a
    seeded random RGB patch quantized to the 1/255 grid."""
    if size <= 0:
        raise ValidationError("trigger size must be positive")
    if kind == "gray_checker":
        ii, jj = np.indices((size, size))
        cell = ((ii + jj) % 2 == 0).astype(np.float32)
        pattern = np.repeat(cell[..., None], channels, axis=2)
        return TriggerSpec(pattern, kind, position)
    if kind == "rgb_patch":
        rng = np.random.default_rng(seed)
        pattern = rng.integers(0, 256, size=(size, size, channels)).astype(np.float32) / 255.0
        return TriggerSpec(pattern, kind, position, seed)
    raise ValidationError(f"unknown trigger kind {kind!r}")


@dataclass
class CleanLabelParams:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    surrogate: str = "surrogate"
    # "target_class": gamma is the fraction of target-class records; "pool": of the whole pool
    ratio_basis: str = "target_class"


@dataclass
class PoisonSpec:
    trigger: TriggerSpec
    target_label: int = 1
    gamma: float = 0.1
    attack_kind: str = "badnet"
    clean_label: Optional[CleanLabelParams] = None

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.attack_kind not in ATTACK_KINDS:
            raise ValidationError(f"unknown attack kind {self.attack_kind!r}")
        if (self.attack_kind == "clean_label") != (self.clean_label is not None):
            raise ValidationError("clean_label parameters are required for, and only for, clean_label attacks")
        if self.target_label < 0:
            raise ValidationError("target label must be a class id")

    def check_classes(self, class_count: int):
        if self.target_label >= class_count:
            raise ValidationError(f"target label {self.target_label} >= class count {class_count}")

    def to_dict(self) -> dict:
        d = {"trigger": self.trigger.to_dict(), "target_label": self.target_label,
             "gamma": self.gamma, "attack_kind": self.attack_kind, "clean_label": None}
        if self.clean_label is not None:
            d["clean_label"] = dict(vars(self.clean_label))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonSpec":
        cl = CleanLabelParams(**d["clean_label"]) if d.get("clean_label") else None
        return cls(TriggerSpec.from_dict(d["trigger"]), int(d["target_label"]), float(d["gamma"]),
                   d["attack_kind"], cl)


@dataclass
class PoisonedDataset:
    data: ImageDataset
    poisoned_indices: np.ndarray
    spec: PoisonSpec
    original_labels: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "dataset": self.data.name,
            "dataset_checksum": self.data.checksum(),
            "size": len(self.data),
            "spec": self.spec.to_dict(),
            "poisoned_indices": [int(i) for i in self.poisoned_indices],
            **self.extra,
        }


def save_poison_manifest(path, entries: dict) -> None:
    """Write ``{pool name: PoisonedDataset}`` bookkeeping to one JSON file."""
    payload = {name: pd.manifest() for name, pd in entries.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_poison_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"poison manifest not found: {path}")
    return json.loads(path.read_text())


def stamp_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Copy of ``image`` (H, W, C) or a batch (N, H, W, C) with the trigger window
    overwritten by the pattern."""
    out = np.array(image, dtype=np.float32, copy=True)
    h, w, c = out.shape[-3:]
    if c != trigger.pattern.shape[2]:
        raise ValidationError(f"trigger has {trigger.pattern.shape[2]} channels, image has {c}")
    rows, cols = trigger.window(h, w)
    out[..., rows, cols, :] = trigger.pattern
    return out


def _count(gamma: float, n: int) -> int:
    return min(n, round_half_away(gamma * n))


def poison_badnet(ds: ImageDataset, spec: PoisonSpec, seed: int) -> PoisonedDataset:
    """Stamp a seeded uniform subset of round(gamma * |ds|) records.

    On a labeled pool the subset is also relabeled to the target class; on an
    unlabeled pool only the images change.
    """
    if spec.attack_kind != "badnet":
        raise ValidationError("poison_badnet needs a badnet PoisonSpec")
    spec.check_classes(ds.class_count)
    rng = np.random.default_rng(seed)
    count = _count(spec.gamma, len(ds))
    idx = np.sort(rng.choice(len(ds), size=count, replace=False)) if count else np.zeros(0, np.int64)
    images = ds.images.copy()
    if count:
        images[idx] = stamp_trigger(images[idx], spec.trigger)
    labels = None
    if ds.labels is not None:
        labels = ds.labels.copy()
        labels[idx] = spec.target_label
    data = ImageDataset(images, labels, ds.class_count, ds.name + "-badnet")
    return PoisonedDataset(data, idx.astype(np.int64), spec, original_labels=ds.labels)


def select_clean_label_targets(ds: ImageDataset, spec: PoisonSpec, seed: int) -> np.ndarray:
    if ds.labels is None:
        raise ValidationError("clean-label poisoning needs the attacker's ground-truth labels")
    members = np.flatnonzero(ds.labels == spec.target_label)
    basis = len(members) if spec.clean_label.ratio_basis == "target_class" else len(ds)
    count = round_half_away(spec.gamma * basis)
    if count > len(members):
        raise ValidationError(
            f"target class has {len(members)} records, {count} requested for clean-label poisoning"
        )
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(members, size=count, replace=False)) if count else np.zeros(0, np.int64)


def perturb_clean_label(ds: ImageDataset, spec: PoisonSpec, surrogate, seed: int):
    """PGD-perturb the selected target-class records away from their class.
    Returns ``(indices, perturbed images)`` before stamping."""
    from .trainer import pgd_attack

    if spec.attack_kind != "clean_label":
        raise ValidationError("perturb_clean_label needs a clean_label PoisonSpec")
    spec.check_classes(ds.class_count)
    idx = select_clean_label_targets(ds, spec, seed)
    cl = spec.clean_label
    perturbed = pgd_attack(surrogate, ds.images[idx], ds.labels[idx], cl.epsilon, cl.alpha, cl.steps)
    return idx, perturbed


def poison_clean_label(ds: ImageDataset, spec: PoisonSpec, surrogate, seed: int) -> PoisonedDataset:
    """Perturb-then-stamp a seeded subset of the target class; labels stay untouched."""
    idx, perturbed = perturb_clean_label(ds, spec, surrogate, seed)
    images = ds.images.copy()
    if len(idx):
        images[idx] = stamp_trigger(perturbed, spec.trigger)
    data = ImageDataset(images, ds.labels.copy(), ds.class_count, ds.name + "-cleanlabel")
    return PoisonedDataset(data, idx.astype(np.int64), spec, original_labels=ds.labels)


def poison_testset(test: ImageDataset, spec: PoisonSpec) -> PoisonedDataset:
    """Stamp every test record, keeping the original labels for ASR bookkeeping."""
    spec.check_classes(test.class_count)
    images = stamp_trigger(test.images, spec.trigger) if len(test) else test.images.copy()
    data = ImageDataset(images, test.labels, test.class_count, test.name + "-poisoned")
    return PoisonedDataset(data, np.arange(len(test), dtype=np.int64), spec, original_labels=test.labels)
