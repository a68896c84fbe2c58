"""Config-driven orchestration shared by the CLI and the acceptance suite.

Data preparation lives here because it is the only place allowed to see both
the clean sources and the poison bookkeeping; defense code receives plain
``ImageDataset`` objects loaded from the data directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .. import augment
from ..dataio import (ImageDataset, SplitManifest, concat, load_cifar10, load_dataset,
                      load_unlabeled_extra, make_split, make_synthetic, save_dataset)
from ..errors import ConfigError, InputError
from ..poison import (CleanLabelParams, PoisonSpec, make_trigger, poison_badnet, poison_clean_label,
                      poison_testset, save_poison_manifest)
from ..selftrain import SelfTrainConfig, run_selftrain
from ..sslcluster import SimCLRConfig, SSLSelfTrainConfig, run_ssl_selftrain
from ..trainer import ModelSpec, TrainConfig, TrainedModel, train
from .config import parse_decay, section
from .metrics import EvalResult, eval_model, evaluator

log = logging.getLogger(__name__)

DATA_FILES = ("labeled.npz", "unlabeled.npz", "test_clean.npz", "test_poisoned.npz")


@dataclass
class DataBundle:
    labeled: ImageDataset
    unlabeled: ImageDataset
    test_clean: ImageDataset
    test_poisoned: ImageDataset
    target: int
    split: Optional[SplitManifest] = None
    poisoned: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return self.labeled.class_count

    def checksums(self) -> dict:
        return {name: getattr(self, name).checksum()
                for name in ("labeled", "unlabeled", "test_clean", "test_poisoned")}


# ---------------------------------------------------------------------------
# config -> dataclasses


def model_spec(cfg: dict, data: DataBundle) -> ModelSpec:
    return ModelSpec(cfg["model.arch"], data.class_count, data.labeled.shape)


def train_config(cfg: dict, stage: str) -> TrainConfig:
    """``stage`` is pretrain, retrain or final; the last two inherit the optimizer
    and standard-augmentation settings of pretraining."""
    base, own = section(cfg, "pretrain"), section(cfg, stage)
    return TrainConfig(
        epochs=own["epochs"], batch_size=own["batch_size"], lr=own["lr"],
        lr_decay=parse_decay(own["lr_decay"]), momentum=base["momentum"],
        weight_decay=base["weight_decay"], standard_augment=base["standard_augment"],
        crop_padding=base["crop_padding"], rotation_degrees=base["rotation"], seed=own["seed"],
    )


def selftrain_config(cfg: dict, strong_aug: Optional[str] = None) -> SelfTrainConfig:
    s = section(cfg, "selftrain")
    return SelfTrainConfig(
        iterations=s["iterations"], fraction_per_iter=s["k"],
        strong_aug=s["strong_aug"] if strong_aug is None else strong_aug,
        pl_scope=s["pl_scope"], augment_labeled_only=s["augment_labeled_only"],
        retrain=train_config(cfg, "retrain"), final=train_config(cfg, "final"), seed=s["seed"],
    )


def simclr_config(cfg: dict) -> SimCLRConfig:
    s = section(cfg, "simclr")
    return SimCLRConfig(arch=s["arch"], epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"],
                        momentum=s["momentum"], weight_decay=s["weight_decay"],
                        temperature=s["temperature"], proj_dim=s["proj_dim"],
                        crop_scale=(s["crop_scale_min"], 1.0), jitter_strength=s["jitter_strength"],
                        seed=s["seed"])


def ssl_config(cfg: dict) -> SSLSelfTrainConfig:
    return SSLSelfTrainConfig(simclr_config(cfg), selftrain_config(cfg, cfg["ssl.strong_aug"]),
                              n_clusters=cfg["cluster.k"] or None, cluster_seed=cfg["cluster.seed"])


def poison_spec(cfg: dict, channels: int, gamma: float, basis: str = "target_class") -> PoisonSpec:
    trigger = make_trigger(cfg["poison.trigger"], cfg["poison.trigger_size"], channels,
                           cfg["poison.position"], seed=cfg["poison.seed"])
    clean = None
    if cfg["poison.attack"] == "clean_label":
        clean = CleanLabelParams(cfg["poison.clean_label.epsilon"], cfg["poison.clean_label.alpha"],
                                 cfg["poison.clean_label.steps"],
                                 surrogate=cfg["poison.clean_label.surrogate_arch"], ratio_basis=basis)
    return PoisonSpec(trigger, cfg["poison.target"], gamma, cfg["poison.attack"], clean)


# ---------------------------------------------------------------------------
# data


def load_sources(cfg: dict):
    """Clean labeled training source, clean test set and optional extra unlabeled images."""
    seed = cfg["data.seed"]
    if cfg["data.source"] == "synthetic":
        s = section(cfg, "data.synthetic")
        train_ds = make_synthetic(s["classes"], s["per_class"], s["side"], seed, s["noise"], "synthetic-train")
        test_ds = make_synthetic(s["classes"], s["test_per_class"], s["side"], seed + 1, s["noise"],
                                 "synthetic-test")
    else:
        if not cfg["data.cifar_path"]:
            raise ConfigError("data.cifar_path is required when data.source is cifar10")
        train_ds = load_cifar10(cfg["data.cifar_path"], train=True)
        test_ds = load_cifar10(cfg["data.cifar_path"], train=False)
        if cfg["data.subset"]:
            sub, _ = make_split(train_ds, min(1.0, cfg["data.subset"] / len(train_ds)), seed)
            train_ds = sub.labeled
    extra = None
    if cfg["data.extra_path"]:
        extra = load_unlabeled_extra(cfg["data.extra_path"], train_ds.class_count)
    return train_ds, test_ds, extra


def train_surrogate(cfg: dict, clean: ImageDataset) -> TrainedModel:
    tcfg = train_config(cfg, "pretrain")
    tcfg.epochs = cfg["poison.clean_label.surrogate_epochs"]
    tcfg.lr_decay = [(e, f) for e, f in tcfg.lr_decay if e < tcfg.epochs]
    spec = ModelSpec(cfg["poison.clean_label.surrogate_arch"], clean.class_count, clean.shape)
    return train(clean, spec, tcfg)


def build_data(cfg: dict) -> DataBundle:
    train_ds, test_ds, extra = load_sources(cfg)
    split, split_manifest = make_split(train_ds, cfg["data.labeled_fraction"], cfg["data.seed"])
    channels = train_ds.shape[2]
    pseed = cfg["poison.seed"]
    spec_l = poison_spec(cfg, channels, cfg["poison.gamma_labeled"])
    spec_u = poison_spec(cfg, channels, cfg["poison.gamma_unlabeled"],
                         cfg["poison.clean_label.unlabeled_basis"])
    # attacker-side view of the unlabeled pool keeps ground truth for clean-label targeting
    unlabeled_truth = train_ds.subset(split.unlabeled_source, name=f"{train_ds.name}-unlabeled")

    if cfg["poison.attack"] == "badnet":
        pl = poison_badnet(split.labeled, spec_l, pseed + 1)
        pu = poison_badnet(unlabeled_truth.without_labels(), spec_u, pseed + 2)
    else:
        surrogate = train_surrogate(cfg, train_ds)
        pl = poison_clean_label(split.labeled, spec_l, surrogate, pseed + 1)
        pu = poison_clean_label(unlabeled_truth, spec_u, surrogate, pseed + 2)
    unlabeled = pu.data.without_labels(name="unlabeled")
    if extra is not None:
        unlabeled = concat([unlabeled, extra.without_labels()], name="unlabeled")
    # the test trigger is the BadNet pattern whichever attack poisoned training
    pt = poison_testset(test_ds, spec_l)
    return DataBundle(
        labeled=ImageDataset(pl.data.images, pl.data.labels, pl.data.class_count, "labeled"),
        unlabeled=unlabeled,
        test_clean=ImageDataset(test_ds.images, test_ds.labels, test_ds.class_count, "test_clean"),
        test_poisoned=ImageDataset(pt.data.images, pt.data.labels, pt.data.class_count, "test_poisoned"),
        target=cfg["poison.target"],
        split=split_manifest,
        poisoned={"labeled": pl, "unlabeled": pu, "test": pt},
    )


def save_data(data: DataBundle, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("labeled", "unlabeled", "test_clean", "test_poisoned"):
        save_dataset(getattr(data, name), out / f"{name}.npz")
    if data.split is not None:
        data.split.save(out / "split.json")
    if data.poisoned:
        save_poison_manifest(out / "poison_manifest.json", data.poisoned)
    (out / "target.txt").write_text(f"{data.target}\n")
    return out


def load_data(path) -> DataBundle:
    path = Path(path)
    missing = [f for f in DATA_FILES + ("target.txt",) if not (path / f).exists()]
    if missing:
        raise InputError(f"data directory {path} lacks {', '.join(missing)}")
    split = SplitManifest.load(path / "split.json") if (path / "split.json").exists() else None
    return DataBundle(
        labeled=load_dataset(path / "labeled.npz"),
        unlabeled=load_dataset(path / "unlabeled.npz"),
        test_clean=load_dataset(path / "test_clean.npz"),
        test_poisoned=load_dataset(path / "test_poisoned.npz"),
        target=int((path / "target.txt").read_text().strip()),
        split=split,
    )


# ---------------------------------------------------------------------------
# stages


def pretrain(cfg: dict, data: DataBundle) -> tuple:
    """Supervised training on the (poisoned) labeled pool. Returns ``(model, EvalResult)``."""
    model = train(data.labeled, model_spec(cfg, data), train_config(cfg, "pretrain"))
    return model, eval_model(model, data.test_clean, data.test_poisoned, data.target)


def selftrain(cfg: dict, data: DataBundle, pretrained: TrainedModel, run_dir=None,
              strong_aug: Optional[str] = None):
    """Self-training with strong augmentation (the baseline when the augmentation is none).
    The labeled pool's labels are dropped before the loop sees it."""
    st = selftrain_config(cfg, strong_aug)
    ev = evaluator(data.test_clean, data.test_poisoned, data.target)
    return run_selftrain(pretrained, data.labeled.images, data.unlabeled, st, ev, run_dir)


def ssl_selftrain(cfg: dict, data: DataBundle, pretrained: TrainedModel, run_dir=None, encoder=None):
    ev = evaluator(data.test_clean, data.test_poisoned, data.target)
    return run_ssl_selftrain(pretrained, data.labeled, data.unlabeled, ssl_config(cfg), ev, run_dir,
                             encoder=encoder)


def final_result(trace: list) -> EvalResult:
    row = trace[-1]
    return EvalResult(float(row["sa"]), float(row["asr"]), int(row["n_clean"]),
                      int(row["n_attack_eligible"]))


def sweep_entries(cfg: dict) -> list:
    text = cfg["sweep.entries"].strip()
    if not text:
        return augment.sweep_zoo()
    return [augment.parse(t.strip()) for t in text.split(",") if t.strip()]
