"""Dataset containers, CIFAR-10 binary ingestion, stratified splitting and the
synthetic desk-scale fixture.

Images are held as float32 arrays of shape (N, H, W, C) with values in [0, 1].
Any mean/std normalization belongs to the model, so poisoning and augmentation
work directly in pixel space.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataFormatError, EmptyDatasetError, InputError, ValidationError

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: Optional[np.ndarray]
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 4:
            raise ValidationError(f"images must be (N, H, W, C), got shape {images.shape}")
        if images.dtype != np.float32:
            images = images.astype(np.float32)
        self.images = images
        if self.class_count <= 0:
            raise ValidationError("class_count must be positive")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(images):
                raise ValidationError(
                    f"{len(labels)} labels for {len(images)} images in {self.name!r}"
                )
            if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ValidationError(f"labels of {self.name!r} outside 0..{self.class_count - 1}")
            self.labels = labels
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValidationError(f"pixels of {self.name!r} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices, name: Optional[str] = None) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            class_count=self.class_count,
            name=name or self.name,
        )

    def without_labels(self, name: Optional[str] = None) -> "ImageDataset":
        return ImageDataset(self.images, None, self.class_count, name or self.name)

    def with_labels(self, labels, name: Optional[str] = None) -> "ImageDataset":
        return ImageDataset(self.images, labels, self.class_count, name or self.name)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass
class SplitManifest:
    source: str
    seed: int
    labeled_fraction: float
    labeled_indices: list
    unlabeled_indices: list
    checksum: str

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "labeled_fraction": self.labeled_fraction,
            "checksum": self.checksum,
            "labeled_indices": [int(i) for i in self.labeled_indices],
            "unlabeled_indices": [int(i) for i in self.unlabeled_indices],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        path = Path(path)
        if not path.exists():
            raise InputError(f"split manifest not found: {path}")
        d = json.loads(path.read_text())
        return cls(
            source=d["source"],
            seed=int(d["seed"]),
            labeled_fraction=float(d["labeled_fraction"]),
            labeled_indices=list(d["labeled_indices"]),
            unlabeled_indices=list(d["unlabeled_indices"]),
            checksum=d["checksum"],
        )

    def apply(self, ds: ImageDataset) -> "SplitDataset":
        """Rebuild the split from its source dataset, refusing a different source."""
        if ds.checksum() != self.checksum:
            raise DataFormatError("dataset checksum does not match the split manifest")
        return _build_split(ds, self.labeled_indices, self.unlabeled_indices, self.labeled_fraction)


@dataclass
class SplitDataset:
    labeled: ImageDataset
    unlabeled: ImageDataset
    labeled_fraction: float
    test_clean: Optional[ImageDataset] = None
    labeled_source: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    unlabeled_source: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout


def _parse_cifar_records(raw: bytes, source: str):
    if len(raw) == 0:
        raise EmptyDatasetError(f"{source}: no records")
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{source}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    # each record stores the red plane, then green, then blue, each row-major
    pixels = rec[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pixels, labels


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return path.read_bytes()


def _cifar_files(path: Path, train: bool) -> list:
    if path.is_file():
        return [path]
    if not path.exists():
        raise InputError(f"no such file or directory: {path}")
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    names = CIFAR_TRAIN_FILES if train else [CIFAR_TEST_FILE]
    return [path / n for n in names]


def load_cifar10(path, train: bool = True) -> ImageDataset:
    """Read CIFAR-10 binary batches.

    ``path`` is either one batch file or the directory holding
    ``data_batch_{1..5}.bin`` / ``test_batch.bin``.
    """
    path = Path(path)
    pixels, labels = [], []
    for f in _cifar_files(path, train):
        p, l = _parse_cifar_records(_read_bytes(f), str(f))
        pixels.append(p)
        labels.append(l)
    images = np.concatenate(pixels).astype(np.float32) / 255.0
    labels = np.concatenate(labels)
    if labels.max() >= 10:
        raise DataFormatError(f"{path}: label byte {labels.max()} outside 0..9")
    return ImageDataset(images, labels, 10, name="cifar10-" + ("train" if train else "test"))


def write_cifar_records(path, images_u8: np.ndarray, labels) -> None:
    """Write uint8 (N, 32, 32, 3) images in the CIFAR-10 binary record layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    rec = np.concatenate([np.asarray(labels, np.uint8).reshape(-1, 1), planes], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_unlabeled_extra(path, class_count: int = 10) -> ImageDataset:
    """Load an auxiliary unlabeled image archive, dropping any labels.

    Accepted layouts: CIFAR-style ``.bin`` records, ``.npy``/``.npz`` holding a
    uint8 (N, 32, 32, 3) array (key ``data`` or ``images``), or a pickle with a
    ``data`` entry, which is how the public 500K TinyImages subset ships.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".bin":
        pixels, _ = _parse_cifar_records(path.read_bytes(), str(path))
    elif suffix in (".npy", ".npz"):
        arr = np.load(path, allow_pickle=False)
        if isinstance(arr, np.lib.npyio.NpzFile):
            key = "data" if "data" in arr.files else "images" if "images" in arr.files else None
            if key is None:
                raise DataFormatError(f"{path}: expected a 'data' or 'images' array")
            arr = arr[key]
        pixels = arr
    elif suffix in (".pickle", ".pkl"):
        with open(path, "rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, dict) or "data" not in obj:
            raise DataFormatError(f"{path}: expected a dict with a 'data' entry")
        pixels = np.asarray(obj["data"])
    else:
        raise DataFormatError(f"{path}: unsupported archive type {suffix!r}")
    pixels = np.asarray(pixels)
    if pixels.ndim != 4 or pixels.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS):
        raise DataFormatError(f"{path}: expected (N, 32, 32, 3) pixels, got {pixels.shape}")
    if len(pixels) == 0:
        raise EmptyDatasetError(f"{path}: no images")
    if pixels.dtype != np.uint8:
        raise DataFormatError(f"{path}: expected uint8 pixels, got {pixels.dtype}")
    return ImageDataset(pixels.astype(np.float32) / 255.0, None, class_count, name=path.stem)


# ---------------------------------------------------------------------------
# artifact serialization


def _on_byte_grid(images: np.ndarray) -> bool:
    scaled = images.astype(np.float64) * 255.0
    as_u8 = np.rint(scaled)
    return bool(np.array_equal((as_u8.astype(np.float32) / np.float32(255.0)), images))


def save_dataset(ds: ImageDataset, path) -> None:
    """Save to ``.npz``. Images on the 1/255 grid go to disk as uint8, others as float32,
    so loading always reproduces the arrays exactly."""
    if _on_byte_grid(ds.images):
        images = np.rint(ds.images.astype(np.float64) * 255.0).astype(np.uint8)
    else:
        images = ds.images
    payload = {
        "images": images,
        "class_count": np.int64(ds.class_count),
        "name": np.array(ds.name),
    }
    if ds.labels is not None:
        payload["labels"] = ds.labels
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_dataset(path) -> ImageDataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        images = z["images"]
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / np.float32(255.0)
        labels = z["labels"] if "labels" in z.files else None
        return ImageDataset(images, labels, int(z["class_count"]), str(z["name"]))


# ---------------------------------------------------------------------------
# splitting


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _build_split(ds, labeled_idx, unlabeled_idx, fraction) -> SplitDataset:
    labeled_idx = np.asarray(labeled_idx, np.int64)
    unlabeled_idx = np.asarray(unlabeled_idx, np.int64)
    return SplitDataset(
        labeled=ds.subset(labeled_idx, name=f"{ds.name}-labeled"),
        unlabeled=ds.subset(unlabeled_idx).without_labels(name=f"{ds.name}-unlabeled"),
        labeled_fraction=fraction,
        labeled_source=labeled_idx,
        unlabeled_source=unlabeled_idx,
    )


def make_split(ds: ImageDataset, labeled_fraction: float, seed: int):
    """Stratified labeled/unlabeled split.

    Each class contributes round(fraction * class_size) labeled records drawn
    with a seeded permutation; everything else goes to the unlabeled pool,
    which keeps images only. Returns ``(SplitDataset, SplitManifest)``.
    """
    if not (0.0 < labeled_fraction <= 1.0):
        raise ValidationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if ds.labels is None:
        raise ValidationError("stratified split needs a labeled dataset")
    if len(ds) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        n = min(len(members), round_half_away(labeled_fraction * len(members)))
        labeled.append(members[:n])
        unlabeled.append(members[n:])
    labeled_idx = np.sort(np.concatenate(labeled))
    unlabeled_idx = np.sort(np.concatenate(unlabeled))
    split = _build_split(ds, labeled_idx, unlabeled_idx, labeled_fraction)
    manifest = SplitManifest(
        source=ds.name,
        seed=int(seed),
        labeled_fraction=float(labeled_fraction),
        labeled_indices=labeled_idx.tolist(),
        unlabeled_indices=unlabeled_idx.tolist(),
        checksum=ds.checksum(),
    )
    return split, manifest


# ---------------------------------------------------------------------------
# synthetic fixture


def _class_palette(classes: int) -> np.ndarray:
    # evenly spaced hues at alternating value levels keep neighbouring classes apart;
    # independent of the seed so train and test fixtures share class colors
    hues = np.arange(classes) / classes
    sat = np.where(np.arange(classes) % 2 == 0, 0.75, 0.55)
    val = np.where(np.arange(classes) % 3 == 0, 0.85, np.where(np.arange(classes) % 3 == 1, 0.65, 0.5))
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(np.stack([hues, sat, val], axis=1)).astype(np.float32)


def make_synthetic(classes: int, per_class: int, side: int, seed: int,
                   noise: float = 0.12, name: Optional[str] = None) -> ImageDataset:
    """Class-conditional color images for fast tests.

    Each class has a base color; every image adds a random brightness shift, a
    smooth random blob and per-pixel Gaussian noise on top of it. Pixels are
    quantized to the 1/255 grid, like images loaded from disk.
    """
    for key, val in (("classes", classes), ("per_class", per_class), ("side", side)):
        if int(val) <= 0:
            raise ValidationError(f"{key} must be positive, got {val}")
    if noise < 0:
        raise ValidationError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    palette = _class_palette(classes)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) / max(side - 1, 1)
    centers = rng.uniform(0.2, 0.8, size=(n, 2)).astype(np.float32)
    widths = rng.uniform(0.15, 0.35, size=(n, 1, 1)).astype(np.float32)
    blob = np.exp(
        -((yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2)
        / (2 * widths ** 2)
    )
    blob_amp = rng.uniform(-0.15, 0.15, size=(n, 1, 1, 1)).astype(np.float32)
    shift = rng.normal(0, 0.04, size=(n, 1, 1, 1)).astype(np.float32)
    images = palette[labels][:, None, None, :] + shift + blob_amp * blob[..., None]
    images = images + rng.normal(0, noise, size=(n, side, side, 3)).astype(np.float32)
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)
    order = rng.permutation(n)
    return ImageDataset(images[order], labels[order], classes,
                        name=name or f"synthetic-c{classes}-n{per_class}-s{side}-seed{seed}")


def concat(datasets: Sequence[ImageDataset], name: str = "concat") -> ImageDataset:
    labeled = all(d.labels is not None for d in datasets)
    return ImageDataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]) if labeled else None,
        datasets[0].class_count,
        name,
    )


def default_run_root() -> Path:
    return Path(os.environ.get("SELFTRAIN_BACKDOOR_RUNS", "runs"))
