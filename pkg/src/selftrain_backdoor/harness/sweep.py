"""Augmentation sweep on a poisoned model: how much does each test-time
transformation break the trigger, and what does it cost in clean accuracy."""

from __future__ import annotations

import csv
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import augment
from ..dataio import ImageDataset
from ..errors import ValidationError
from ..trainer import predict
from .metrics import attack_success_rate, standard_accuracy

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["augmentation", "group", "repeat", "sa", "asr", "n_clean", "n_attack_eligible"]
SA_MODES = ("augmented", "clean")


@dataclass
class SweepRow:
    augmentation: str
    group: str
    repeat: int
    sa: float
    asr: float
    n_clean: int
    n_attack_eligible: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in SWEEP_COLUMNS}


def repeat_seed(seed: int, canonical: str, repeat: int) -> int:
    # keyed by the canonical string so reordering the menu does not reshuffle streams
    return int(np.random.SeedSequence([seed, zlib.crc32(canonical.encode()), repeat]).generate_state(1)[0])


def repeats_for(spec, repeats: int) -> int:
    return repeats if augment.is_stochastic(spec) else 1


def sweep_entry(model, spec, test_clean: ImageDataset, test_poisoned: ImageDataset, target: int,
                repeats: int, seed: int, sa_on: str = "augmented") -> list:
    name = augment.to_string(spec)
    rows = []
    clean_pred = None
    for r in range(repeats_for(spec, repeats)):
        s = repeat_seed(seed, name, r)
        xp = augment.apply_batch(spec, test_poisoned.images, s)
        pp, _ = predict(model, xp)
        asr, n_elig = attack_success_rate(pp, test_poisoned.labels, target)
        if sa_on == "augmented":
            pc, _ = predict(model, augment.apply_batch(spec, test_clean.images, s))
        else:
            if clean_pred is None:
                clean_pred, _ = predict(model, test_clean.images)
            pc = clean_pred
        rows.append(SweepRow(name, augment.sweep_group(spec), r, standard_accuracy(pc, test_clean.labels),
                             asr, len(test_clean), n_elig))
    return rows


def _worker(args):
    return sweep_entry(*args)


def aug_sweep(model, test_clean: ImageDataset, test_poisoned: ImageDataset, target: int,
              zoo=None, repeats: int = augment.SWEEP_REPEATS, seed: int = 0, sa_on: str = "augmented",
              out_dir=None, workers: int = 1) -> list:
    """Evaluate ``model`` under every zoo entry. Stochastic entries run ``repeats``
    times with independent seeds; deterministic ones once. With ``out_dir`` each
    entry also lands in ``entries/<index>.csv``."""
    if sa_on not in SA_MODES:
        raise ValidationError(f"sa_on must be one of {SA_MODES}")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    if test_clean.labels is None or test_poisoned.labels is None:
        raise ValidationError("sweep test sets must be labeled")
    zoo = augment.sweep_zoo() if zoo is None else [augment.parse(z) if isinstance(z, str) else z for z in zoo]
    jobs = [(model, spec, test_clean, test_poisoned, target, repeats, seed, sa_on) for spec in zoo]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_entry = list(pool.map(_worker, jobs))
    else:
        per_entry = [_worker(j) for j in jobs]
    rows = []
    for i, entry_rows in enumerate(per_entry):
        log.info("%s: asr %.3f sa %.3f", entry_rows[0].augmentation,
                 np.mean([r.asr for r in entry_rows]), np.mean([r.sa for r in entry_rows]))
        if out_dir is not None:
            d = Path(out_dir) / "entries"
            d.mkdir(parents=True, exist_ok=True)
            write_sweep(entry_rows, d / f"{i:03d}.csv")
        rows.extend(entry_rows)
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            d = r.to_dict()
            d["sa"], d["asr"] = repr(float(d["sa"])), repr(float(d["asr"]))
            w.writerow(d)


def read_sweep(path) -> list:
    with open(path, newline="") as fh:
        return [SweepRow(r["augmentation"], r["group"], int(r["repeat"]), float(r["sa"]), float(r["asr"]),
                         int(r["n_clean"]), int(r["n_attack_eligible"])) for r in csv.DictReader(fh)]


def summarize(rows) -> dict:
    """``{augmentation: (mean sa, mean asr, count)}`` in first-seen order."""
    out = {}
    for r in rows:
        out.setdefault(r.augmentation, []).append(r)
    return {k: (float(np.mean([r.sa for r in v])), float(np.mean([r.asr for r in v])), len(v))
            for k, v in out.items()}


def plot_sweep(rows, path) -> None:
    """Boxplots of SA and ASR per sweep group."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {}
    for r in rows:
        groups.setdefault(r.group, []).append(r)
    names = list(groups)
    fig, axes = plt.subplots(2, 1, figsize=(max(8, 0.45 * len(names)), 8), sharex=True)
    for ax, metric in zip(axes, ("sa", "asr")):
        ax.boxplot([[getattr(r, metric) for r in groups[n]] for n in names])
        ax.set_ylabel(metric.upper())
        ax.set_ylim(-0.02, 1.02)
        ax.grid(axis="y", alpha=0.3)
    axes[-1].set_xticks(range(1, len(names) + 1), names, rotation=70, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
