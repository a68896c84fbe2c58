"""Supervised training, inference and the PGD inner loop."""

from __future__ import annotations

import contextlib
import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import ImageDataset
from .errors import DataFormatError, EmptyDatasetError, InputError, TrainingError, ValidationError
from .models import build_classifier

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "selftrain-backdoor-checkpoint"
CHECKPOINT_VERSION = 1
ARCHS = ("tiny_cnn", "vgg16", "resnet18")

_device = torch.device("cpu")


def set_device(name: str) -> torch.device:
    """Select the compute backend used by training, inference and PGD."""
    global _device
    if name == "cuda" and not torch.cuda.is_available():
        raise ValidationError("CUDA requested but no CUDA device is available")
    if name not in ("cpu", "cuda"):
        raise ValidationError(f"unknown device {name!r}")
    _device = torch.device(name)
    return _device


def get_device() -> torch.device:
    return _device


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "tiny_cnn"
    class_count: int = 10
    input_shape: tuple = (32, 32, 3)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown arch {self.arch!r}")
        h, w, c = self.input_shape
        if h != w:
            raise ValidationError("only square inputs are supported")
        if self.arch == "tiny_cnn" and h % 8:
            raise ValidationError("tiny_cnn needs an input side divisible by 8")
        if self.arch == "vgg16" and h % 32:
            raise ValidationError("vgg16 needs an input side divisible by 32")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    lr_decay: list = field(default_factory=lambda: [(100, 0.5)])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    standard_augment: bool = True
    crop_padding: int = 4
    rotation_degrees: float = 2.0
    seed: int = 0

    def validate(self, allow_zero_epochs: bool = False):
        if self.epochs < 0 or (self.epochs == 0 and not allow_zero_epochs):
            raise ValidationError("epochs must be positive")
        if self.batch_size <= 0 or self.lr <= 0:
            raise ValidationError("batch_size and lr must be positive")
        for epoch, factor in self.lr_decay:
            if self.epochs and not (0 < epoch < self.epochs):
                raise ValidationError(f"decay epoch {epoch} outside (0, {self.epochs})")
            if factor <= 0:
                raise ValidationError("decay factors must be positive")


@dataclass
class TrainedModel:
    module: torch.nn.Module
    spec: ModelSpec
    provenance: dict = field(default_factory=dict)

    def clone(self) -> "TrainedModel":
        return TrainedModel(copy.deepcopy(self.module), self.spec, copy.deepcopy(self.provenance))

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.module.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def set_determinism(enabled: bool = True) -> None:
    """Trade speed for bit-reproducible kernels."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if enabled:
        torch.set_num_threads(1)


def build_model(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = build_classifier(spec.arch, spec.class_count, spec.input_shape[0], spec.input_shape[2])
    module.to(_device)
    return TrainedModel(module, spec, {"init_seed": seed})


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy()


def standard_augment(x: torch.Tensor, gen: torch.Generator, padding: int, degrees: float) -> torch.Tensor:
    """Random crop with zero padding, horizontal flip and a small rotation, as a single
    affine resample per image."""
    n, _, h, w = x.shape
    shift = torch.randint(-padding, padding + 1, (n, 2), generator=gen).float()
    flip = torch.rand(n, generator=gen) < 0.5
    angle = (torch.rand(n, generator=gen) * 2 - 1) * math.radians(degrees)
    cos, sin = torch.cos(angle), torch.sin(angle)
    sx = torch.where(flip, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = cos * sx
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin * sx
    theta[:, 1, 1] = cos
    theta[:, 0, 2] = shift[:, 0] * 2.0 / w
    theta[:, 1, 2] = shift[:, 1] * 2.0 / h
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _check_labels(ds: ImageDataset, spec: ModelSpec):
    if len(ds) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if ds.labels is None:
        raise ValidationError("training needs labels")
    if ds.labels.max() >= spec.class_count:
        raise ValidationError(f"label {ds.labels.max()} >= class_count {spec.class_count}")
    if tuple(ds.shape) != tuple(spec.input_shape):
        raise ValidationError(f"images {ds.shape} do not match model input {spec.input_shape}")


def train(ds: ImageDataset, mspec: ModelSpec, tcfg: TrainConfig,
          init: Optional[TrainedModel] = None, log_every: int = 0) -> TrainedModel:
    """Minimize cross-entropy with SGD + momentum and a step schedule.

    With ``init`` the run warm-starts from a copy of those weights; zero epochs
    then returns the initial model unchanged.
    """
    tcfg.validate(allow_zero_epochs=init is not None)
    if init is not None:
        if init.spec != mspec:
            raise ValidationError(f"warm start architecture {init.spec} does not match {mspec}")
        if tcfg.epochs == 0:
            return init
        model = init.clone()
    else:
        model = build_model(mspec, tcfg.seed)
    _check_labels(ds, mspec)

    net = model.module
    opt = torch.optim.SGD(net.parameters(), lr=tcfg.lr, momentum=tcfg.momentum,
                          weight_decay=tcfg.weight_decay)
    milestones = sorted(tcfg.lr_decay)
    x_all = to_tensor(ds.images)
    y_all = torch.from_numpy(ds.labels)
    order_rng = np.random.default_rng(tcfg.seed)
    aug_gen = torch.Generator().manual_seed(tcfg.seed)
    history = []
    lr = tcfg.lr
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tcfg.seed)
        for epoch in range(tcfg.epochs):
            for e, factor in milestones:
                if e == epoch:
                    lr *= factor
            for g in opt.param_groups:
                g["lr"] = lr
            net.train()
            perm = torch.from_numpy(order_rng.permutation(len(ds)))
            total, count = 0.0, 0
            for start in range(0, len(ds), tcfg.batch_size):
                idx = perm[start:start + tcfg.batch_size]
                if len(idx) < 2 and len(ds) >= 2:
                    continue  # batch norm cannot normalize a single sample
                xb, yb = x_all[idx], y_all[idx]
                if tcfg.standard_augment:
                    xb = standard_augment(xb, aug_gen, tcfg.crop_padding, tcfg.rotation_degrees)
                xb, yb = xb.to(_device), yb.to(_device)
                loss = F.cross_entropy(net(xb), yb)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.append(total / max(count, 1))
            if log_every and (epoch + 1) % log_every == 0:
                log.info("epoch %d/%d loss %.4f lr %.4g", epoch + 1, tcfg.epochs, history[-1], lr)
    net.eval()
    model.provenance = {
        "train_config": _config_dict(tcfg),
        "dataset": ds.name,
        "dataset_checksum": ds.checksum(),
        "warm_start": init is not None,
        "loss_history": history,
        "parent": init.provenance if init is not None else None,
    }
    return model


def _config_dict(tcfg: TrainConfig) -> dict:
    d = asdict(tcfg)
    d["lr_decay"] = [list(p) for p in tcfg.lr_decay]
    return d


@torch.no_grad()
def predict_proba(model: TrainedModel, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(model.spec.input_shape):
        raise ValidationError(
            f"images of shape {images.shape[1:]} do not match model input {model.spec.input_shape}"
        )
    net = model.module
    was_training = net.training
    net.eval()
    out = []
    for start in range(0, len(images), batch_size):
        logits = net(to_tensor(images[start:start + batch_size]).to(_device))
        out.append(torch.softmax(logits, dim=1).cpu())
    net.train(was_training)
    if not out:
        return np.zeros((0, model.spec.class_count), np.float32)
    return torch.cat(out).numpy()


def predict(model: TrainedModel, images: np.ndarray, batch_size: int = 512):
    """Argmax labels and their softmax probabilities, in input order."""
    p = predict_proba(model, images, batch_size)
    labels = p.argmax(axis=1).astype(np.int64)
    return labels, p[np.arange(len(p)), labels]


def project_linf(x: torch.Tensor, x0: torch.Tensor, eps: float) -> torch.Tensor:
    """Clip ``x`` into the eps-ball around ``x0`` and the [0, 1] box.

    Bounds are computed in float64 and rounded inward to the dtype of ``x``, so
    the result never leaves the exact ball.
    """
    lo64 = (x0.double() - eps).clamp(0.0, 1.0)
    hi64 = (x0.double() + eps).clamp(0.0, 1.0)
    lo, hi = lo64.to(x.dtype), hi64.to(x.dtype)
    lo = torch.where(lo.double() < lo64, torch.nextafter(lo, torch.ones_like(lo)), lo)
    hi = torch.where(hi.double() > hi64, torch.nextafter(hi, torch.zeros_like(hi)), hi)
    return torch.minimum(torch.maximum(x, lo), hi)


def input_gradient(net: torch.nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(net(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def pgd_attack(model, images: np.ndarray, true_labels, eps: float, alpha: float, steps: int,
               batch_size: int = 256, return_trace: bool = False):
    """Untargeted L-inf PGD from the clean image (no random start).

    ``model`` is a ``TrainedModel`` or a bare ``nn.Module`` taking NCHW input.
    Each step moves by ``alpha * sign(grad CE)`` and projects onto the
    eps-ball and the pixel box.
    """
    if eps < 0 or alpha < 0 or steps < 0:
        raise ValidationError("eps, alpha and steps must be non-negative")
    net = model.module if isinstance(model, TrainedModel) else model
    images = np.asarray(images, dtype=np.float32)
    labels = torch.as_tensor(np.asarray(true_labels), dtype=torch.long)
    if steps == 0 or len(images) == 0:
        out = images.copy()
        return (out, [out]) if return_trace else out
    was_training = net.training
    net.eval()
    results, traces = [], []
    for start in range(0, len(images), batch_size):
        x0 = to_tensor(images[start:start + batch_size]).to(_device)
        y = labels[start:start + batch_size].to(_device)
        x = x0.clone()
        trace = [x.clone()]
        for step in range(steps):
            grad = input_gradient(net, x, y)
            if not torch.isfinite(grad).all():
                raise TrainingError(f"non-finite input gradient at PGD step {step}")
            x = project_linf(x + alpha * grad.sign(), x0, eps)
            trace.append(x.clone())
        results.append(x)
        traces.append(trace)
    net.train(was_training)
    out = to_numpy(torch.cat(results))
    if return_trace:
        per_step = [to_numpy(torch.cat([t[i] for t in traces])) for i in range(steps + 1)]
        return out, per_step
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {"arch": model.spec.arch, "class_count": model.spec.class_count,
                 "input_shape": list(model.spec.input_shape)},
        "state_dict": model.module.state_dict(),
        "provenance": model.provenance,
    }, path)


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path} is not a model checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: checkpoint version {blob['version']} is newer than supported")
    spec = ModelSpec(blob["spec"]["arch"], blob["spec"]["class_count"], tuple(blob["spec"]["input_shape"]))
    model = build_model(spec)
    model.module.load_state_dict({k: v.to(_device) for k, v in blob["state_dict"].items()})
    model.module.eval()
    model.provenance = blob.get("provenance", {})
    return model


@contextlib.contextmanager
def eval_mode(net: torch.nn.Module):
    was = net.training
    net.eval()
    try:
        yield net
    finally:
        net.train(was)
