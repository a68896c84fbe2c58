"""Self-training bootstrapped from contrastive (SimCLR) embeddings.

An encoder is trained with the NT-Xent loss on both pools, labeled-pool
embeddings are clustered with K-Means, and each cluster takes the majority
given label of its members. The first self-training iteration pseudo-labels
by nearest centroid; later iterations use the classifier as usual.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import ImageDataset
from .errors import DataFormatError, InputError, ValidationError
from .models import Normalize, build_backbone
from .selftrain import SelfTrainConfig, SelfTrainResult, make_table, run_selftrain
from .trainer import TrainedModel, get_device, to_tensor

log = logging.getLogger(__name__)

ENCODER_FORMAT = "selftrain-backdoor-encoder"


class EmptyClusterError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# contrastive encoder


class EncoderModel(nn.Module):
    def __init__(self, arch: str, side: int, channels: int = 3, proj_dim: int = 128,
                 temperature: float = 0.5):
        super().__init__()
        self.arch, self.side, self.channels = arch, side, channels
        self.proj_dim, self.temperature = proj_dim, temperature
        self.normalize = Normalize()
        self.backbone, self.feature_dim = build_backbone(arch, side, channels)
        self.projection = nn.Sequential(
            nn.Linear(self.feature_dim, self.feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(self.feature_dim, proj_dim),
        )

    def features(self, x):
        return self.backbone(self.normalize(x))

    def forward(self, x):
        return self.projection(self.features(x))


@dataclass
class SimCLRConfig:
    arch: str = "resnet18"
    epochs: int = 1000
    batch_size: int = 512
    lr: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 1e-6
    temperature: float = 0.5
    proj_dim: int = 128
    crop_scale: tuple = (0.08, 1.0)
    jitter_strength: float = 0.5
    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    seed: int = 0


def nt_xent_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean NT-Xent loss over the 2B anchors of a batch of B positive pairs."""
    b = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.t() / temperature
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool, device=z.device), float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(sim, targets)


def _yiq_hue_rotate(x: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    to_yiq = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    from_yiq = torch.linalg.inv(to_yiq)
    cos, sin = torch.cos(angle), torch.sin(angle)
    rot = torch.zeros(len(angle), 3, 3)
    rot[:, 0, 0] = 1
    rot[:, 1, 1], rot[:, 1, 2] = cos, -sin
    rot[:, 2, 1], rot[:, 2, 2] = sin, cos
    m = from_yiq @ rot @ to_yiq
    return torch.einsum("nij,njhw->nihw", m, x)


def _gray(x):
    return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).unsqueeze(1)


def simclr_augment(x: torch.Tensor, gen: torch.Generator, cfg: SimCLRConfig) -> torch.Tensor:
    """Random resized crop + flip, color jitter and random grayscale, batched."""
    n = x.shape[0]
    u = lambda *shape: torch.rand(*shape, generator=gen)
    scale = cfg.crop_scale[0] + u(n) * (cfg.crop_scale[1] - cfg.crop_scale[0])
    log_ratio = (u(n) * 2 - 1) * math.log(4 / 3)
    ratio = torch.exp(log_ratio)
    w = torch.sqrt(scale * ratio).clamp(max=1.0)
    h = torch.sqrt(scale / ratio).clamp(max=1.0)
    cx = (u(n) * 2 - 1) * (1 - w)
    cy = (u(n) * 2 - 1) * (1 - h)
    flip = torch.where(u(n) < 0.5, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = w * flip
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    s = cfg.jitter_strength
    if s > 0 and x.shape[1] == 3:
        apply = (u(n) < cfg.jitter_prob).float().view(n, 1, 1, 1)
        factor = lambda r: (1 + (u(n) * 2 - 1) * r).clamp(min=0).view(n, 1, 1, 1)
        y = (x * factor(0.8 * s)).clamp(0, 1)
        mean = _gray(y).mean(dim=(2, 3), keepdim=True)
        y = ((y - mean) * factor(0.8 * s) + mean).clamp(0, 1)
        g = _gray(y)
        y = ((y - g) * factor(0.8 * s) + g).clamp(0, 1)
        y = _yiq_hue_rotate(y, (u(n) * 2 - 1) * 0.2 * s * 2 * math.pi).clamp(0, 1)
        x = apply * y + (1 - apply) * x
        gray = (u(n) < cfg.gray_prob).float().view(n, 1, 1, 1)
        x = gray * _gray(x).expand_as(x) + (1 - gray) * x
    return x


def train_simclr(images, cfg: SimCLRConfig, log_every: int = 0) -> EncoderModel:
    """Contrastive pretraining on an image collection (labels, if any, are ignored)."""
    x_all = images.images if isinstance(images, ImageDataset) else np.asarray(images, np.float32)
    if cfg.batch_size < 2:
        raise ValidationError("NT-Xent needs a batch size of at least 2")
    if len(x_all) < 2:
        raise ValidationError("need at least two images for contrastive training")
    side, channels = x_all.shape[1], x_all.shape[3]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        enc = EncoderModel(cfg.arch, side, channels, cfg.proj_dim, cfg.temperature).to(get_device())
        opt = torch.optim.SGD(enc.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
        xt = to_tensor(x_all)
        order = np.random.default_rng(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        enc.train()
        for epoch in range(cfg.epochs):
            perm = torch.from_numpy(order.permutation(len(xt)))
            total, count = 0.0, 0
            for start in range(0, len(xt), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                xb = xt[idx]
                v1 = simclr_augment(xb, gen, cfg).to(get_device())
                v2 = simclr_augment(xb, gen, cfg).to(get_device())
                loss = nt_xent_loss(enc(v1), enc(v2), cfg.temperature)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            sched.step()
            if log_every and (epoch + 1) % log_every == 0:
                log.info("simclr epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, total / max(count, 1))
    enc.eval()
    return enc


@torch.no_grad()
def embed(encoder: EncoderModel, images, batch_size: int = 512) -> np.ndarray:
    """Backbone representations (projection head excluded), in input order."""
    x = images.images if isinstance(images, ImageDataset) else np.asarray(images, np.float32)
    if x.ndim != 4 or x.shape[1] != encoder.side or x.shape[3] != encoder.channels:
        raise ValidationError(f"images of shape {x.shape[1:]} do not match the encoder input")
    was = encoder.training
    encoder.eval()
    out = [encoder.features(to_tensor(x[i:i + batch_size]).to(get_device())).cpu()
           for i in range(0, len(x), batch_size)]
    encoder.train(was)
    if not out:
        return np.zeros((0, encoder.feature_dim), np.float32)
    return torch.cat(out).numpy()


def save_encoder(encoder: EncoderModel, path) -> None:
    torch.save({"format": ENCODER_FORMAT, "arch": encoder.arch, "side": encoder.side,
                "channels": encoder.channels, "proj_dim": encoder.proj_dim,
                "temperature": encoder.temperature, "state_dict": encoder.state_dict()}, path)


def load_encoder(path) -> EncoderModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"encoder checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != ENCODER_FORMAT:
        raise DataFormatError(f"{path} is not an encoder checkpoint")
    enc = EncoderModel(blob["arch"], blob["side"], blob["channels"], blob["proj_dim"], blob["temperature"])
    enc.load_state_dict(blob["state_dict"])
    enc.to(get_device()).eval()
    return enc


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list = field(default_factory=list)
    cluster_labels: Optional[np.ndarray] = None
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_dict(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "cluster_labels": None if self.cluster_labels is None else self.cluster_labels.tolist(),
            "inertia": self.inertia,
            "n_iter": self.n_iter,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ClusterModel":
        d = json.loads(Path(path).read_text())
        labels = None if d["cluster_labels"] is None else np.asarray(d["cluster_labels"], np.int64)
        return cls(np.asarray(d["centroids"], np.float64), np.zeros(0, np.int64), d["inertia"],
                   d["n_iter"], [], labels, d.get("seed", 0))


def l2_normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.maximum(norms, 1e-12)


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.stack(centers)


def _lloyd(x, centers, max_iter, tol):
    trace = []
    prev = None
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        trace.append(inertia)
        new = centers.copy()
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        centers = new
        if prev is not None and (prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    d2 = _sq_dists(x, centers)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), assign].sum())
    trace.append(inertia)
    return centers, assign, inertia, it, trace


def kmeans(h, k: int, seed: int, n_init: int = 10, max_iter: int = 300, tol: float = 1e-4,
           normalize: bool = True) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` seeded restarts.

    Embeddings are L2-normalized first. Iteration stops once the relative
    inertia improvement drops to ``tol``.
    """
    x = l2_normalize(h) if normalize else np.asarray(h, np.float64)
    if k < 1:
        raise ValidationError("K must be positive")
    if k > len(x):
        raise ValidationError(f"K={k} exceeds the {len(x)} embeddings")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, assign, inertia, n_iter, trace = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterModel(centers, assign, inertia, n_iter, trace, None, seed)
    return best


def vote_labels(clusters: ClusterModel, given_labels, class_count: Optional[int] = None) -> ClusterModel:
    """Label each cluster with the modal given label of its members (ties: smallest id)."""
    given = np.asarray(given_labels, np.int64)
    if len(given) != len(clusters.assignments):
        raise ValidationError("need one given label per clustered record")
    class_count = class_count or int(given.max()) + 1
    labels = np.zeros(clusters.k, np.int64)
    for j in range(clusters.k):
        members = given[clusters.assignments == j]
        if len(members) == 0:
            raise EmptyClusterError(f"cluster {j} has no members")
        labels[j] = np.bincount(members, minlength=class_count).argmax()
    return ClusterModel(clusters.centroids, clusters.assignments, clusters.inertia, clusters.n_iter,
                        clusters.inertia_trace, labels, clusters.seed)


def fit_clusters(h, given_labels, k: int, seed: int, retries: int = 3, **kw) -> ClusterModel:
    """Cluster and vote; an empty cluster triggers up to ``retries`` re-seeded attempts."""
    for attempt in range(retries + 1):
        try:
            return vote_labels(kmeans(h, k, seed + 1000 * attempt, **kw), given_labels)
        except EmptyClusterError:
            log.warning("empty cluster with seed %d, re-seeding", seed + 1000 * attempt)
    raise EmptyClusterError(f"K-Means left an empty cluster after {retries} re-seeded attempts")


def nearest_centroid(h_normalized: np.ndarray, centroids: np.ndarray):
    """Index of the closest centroid (lowest id on ties) and softmax(-distance) confidence."""
    d = np.sqrt(_sq_dists(np.asarray(h_normalized, np.float64), np.asarray(centroids, np.float64)))
    idx = d.argmin(axis=1)
    logits = -d
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return idx, p[np.arange(len(d)), idx]


def cluster_pseudolabel(encoder: EncoderModel, clusters: ClusterModel, images):
    if clusters.cluster_labels is None:
        raise ValidationError("clusters must be labeled by vote_labels first")
    idx, conf = nearest_centroid(l2_normalize(embed(encoder, images)), clusters.centroids)
    return clusters.cluster_labels[idx], conf.astype(np.float32)


# ---------------------------------------------------------------------------
# full loop


@dataclass
class SSLSelfTrainConfig:
    simclr: SimCLRConfig = field(default_factory=SimCLRConfig)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    n_clusters: Optional[int] = None
    cluster_seed: int = 0


@dataclass
class SSLResult:
    selftrain: SelfTrainResult
    encoder: EncoderModel
    clusters: ClusterModel

    @property
    def final(self) -> TrainedModel:
        return self.selftrain.final

    @property
    def trace(self) -> list:
        return self.selftrain.trace


def run_ssl_selftrain(pretrained: TrainedModel, labeled: ImageDataset, unlabeled, cfg: SSLSelfTrainConfig,
                      evaluate: Optional[Callable] = None, run_dir=None,
                      encoder: Optional[EncoderModel] = None) -> SSLResult:
    """Contrastive encoder -> clusters voted by the labeled pool -> self-training whose
    first iteration pseudo-labels by nearest centroid. Pass ``encoder`` to reuse one."""
    if labeled.labels is None:
        raise ValidationError("cluster voting needs the labeled pool's given labels")
    x_u = unlabeled.images if isinstance(unlabeled, ImageDataset) else np.asarray(unlabeled, np.float32)
    class_count = pretrained.spec.class_count
    if encoder is None:
        encoder = train_simclr(np.concatenate([labeled.images, x_u]), cfg.simclr)
    clusters = fit_clusters(embed(encoder, labeled.images), labeled.labels,
                            cfg.n_clusters or class_count, cfg.cluster_seed)
    log.info("cluster labels %s, inertia %.3f", clusters.cluster_labels.tolist(), clusters.inertia)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        save_encoder(encoder, Path(run_dir) / "encoder.ckpt")
        clusters.save(Path(run_dir) / "clusters.json")

    def first_labeler():
        labels, confs = {}, {}
        if cfg.selftrain.pl_scope == "L_and_U":
            labels["L"], confs["L"] = cluster_pseudolabel(encoder, clusters, labeled.images)
        labels["U"], confs["U"] = cluster_pseudolabel(encoder, clusters, x_u)
        return make_table(labels, confs, {"n_labeled": len(labeled)}, 1)

    result = run_selftrain(pretrained, labeled.images, x_u, cfg.selftrain, evaluate, run_dir,
                           first_labeler=first_labeler)
    return SSLResult(result, encoder, clusters)


def simclr_config_dict(cfg: SimCLRConfig) -> dict:
    d = asdict(cfg)
    d["crop_scale"] = list(cfg.crop_scale)
    return d
