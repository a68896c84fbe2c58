"""Flat, dotted-key configuration with two shipped profiles.

A config is a plain ``dict`` such as ``{"poison.gamma_labeled": 0.1, ...}``.
Resolution order: profile defaults, then the config file, then ``--set``
overrides. Every key must exist in the profile and keep its type.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from ..errors import ConfigError, InputError

DESK = {
    "data.source": "synthetic",
    "data.cifar_path": "",
    "data.extra_path": "",
    "data.subset": 0,
    "data.synthetic.classes": 10,
    "data.synthetic.per_class": 300,
    "data.synthetic.test_per_class": 100,
    "data.synthetic.side": 16,
    "data.synthetic.noise": 0.12,
    "data.labeled_fraction": 0.2,
    "data.seed": 0,
    "poison.attack": "badnet",
    "poison.trigger": "gray_checker",
    "poison.trigger_size": 3,
    "poison.position": "lower_right",
    "poison.target": 1,
    "poison.gamma_labeled": 0.1,
    "poison.gamma_unlabeled": 0.0,
    "poison.seed": 0,
    "poison.clean_label.epsilon": 8 / 255,
    "poison.clean_label.alpha": 2 / 255,
    "poison.clean_label.steps": 10,
    "poison.clean_label.surrogate_arch": "tiny_cnn",
    "poison.clean_label.surrogate_epochs": 30,
    "poison.clean_label.unlabeled_basis": "pool",
    "model.arch": "tiny_cnn",
    "pretrain.epochs": 30,
    "pretrain.batch_size": 64,
    "pretrain.lr": 0.01,
    "pretrain.lr_decay": "15:0.5",
    "pretrain.momentum": 0.9,
    "pretrain.weight_decay": 1e-4,
    "pretrain.standard_augment": True,
    "pretrain.crop_padding": 2,
    "pretrain.rotation": 2.0,
    "pretrain.seed": 0,
    "retrain.epochs": 8,
    "retrain.batch_size": 64,
    "retrain.lr": 0.01,
    "retrain.lr_decay": "",
    "retrain.seed": 100,
    "final.epochs": 20,
    "final.batch_size": 64,
    "final.lr": 0.01,
    "final.lr_decay": "10:0.5",
    "final.seed": 200,
    "selftrain.iterations": 4,
    "selftrain.k": 0.3,
    "selftrain.strong_aug": "rcs:0.5+vflip",
    "selftrain.pl_scope": "L_and_U",
    "selftrain.augment_labeled_only": True,
    "selftrain.seed": 0,
    "simclr.arch": "tiny_cnn",
    "simclr.epochs": 20,
    "simclr.batch_size": 128,
    "simclr.lr": 0.3,
    "simclr.momentum": 0.9,
    "simclr.weight_decay": 1e-6,
    "simclr.temperature": 0.5,
    "simclr.proj_dim": 128,
    "simclr.crop_scale_min": 0.2,
    "simclr.jitter_strength": 0.5,
    "simclr.seed": 0,
    "cluster.k": 0,
    "cluster.seed": 0,
    "ssl.strong_aug": "none",
    "sweep.entries": "",
    "sweep.repeats": 6,
    "sweep.seed": 0,
    "sweep.sa_on": "augmented",
    "sweep.plot": True,
    "run.deterministic": True,
    "run.device": "cpu",
}

PAPER = {
    **DESK,
    "data.source": "cifar10",
    "poison.trigger_size": 5,
    "poison.clean_label.surrogate_arch": "resnet18",
    "poison.clean_label.surrogate_epochs": 200,
    "model.arch": "vgg16",
    "pretrain.epochs": 200,
    "pretrain.batch_size": 128,
    "pretrain.lr_decay": "100:0.5",
    "pretrain.crop_padding": 4,
    "retrain.epochs": 150,
    "retrain.batch_size": 128,
    "retrain.lr_decay": "100:0.5",
    "final.epochs": 300,
    "final.batch_size": 128,
    "final.lr_decay": "100:0.5,200:0.5",
    "simclr.arch": "resnet18",
    "simclr.epochs": 1000,
    "simclr.batch_size": 512,
    "simclr.lr": 0.6,
    "simclr.crop_scale_min": 0.08,
    "run.deterministic": False,
    "run.device": "cuda",
}

# CIFAR-10 fully labeled, 500K TinyImages as the unlabeled pool, ResNet-18
PAPER_TINYIMAGES = {
    **PAPER,
    "data.labeled_fraction": 1.0,
    "model.arch": "resnet18",
    "poison.gamma_unlabeled": 0.01,
    "pretrain.lr": 0.1,
    "pretrain.lr_decay": "90:0.1,180:0.1",
    "retrain.epochs": 110,
    "retrain.lr": 0.1,
    "retrain.lr_decay": "50:0.1,100:0.1",
    "final.epochs": 250,
    "final.lr": 0.1,
    "final.lr_decay": "90:0.1,180:0.1",
}

PROFILES = {"desk": DESK, "paper": PAPER, "paper-tinyimages": PAPER_TINYIMAGES}

CHOICES = {
    "data.source": ("synthetic", "cifar10"),
    "poison.attack": ("badnet", "clean_label"),
    "poison.trigger": ("gray_checker", "rgb_patch"),
    "poison.position": ("lower_right", "lower_left", "upper_right", "upper_left"),
    "poison.clean_label.unlabeled_basis": ("pool", "target_class"),
    "model.arch": ("tiny_cnn", "vgg16", "resnet18"),
    "poison.clean_label.surrogate_arch": ("tiny_cnn", "vgg16", "resnet18"),
    "simclr.arch": ("tiny_cnn", "vgg16", "resnet18"),
    "selftrain.pl_scope": ("U_only", "L_and_U"),
    "sweep.sa_on": ("augmented", "clean"),
    "run.device": ("cpu", "cuda"),
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if value is None:
            return ""
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    raise ConfigError(f"{key}: unsupported type")


def validate(cfg: dict) -> dict:
    for key, options in CHOICES.items():
        if cfg[key] not in options:
            raise ConfigError(f"{key} must be one of {options}, got {cfg[key]!r}")
    for key in ("pretrain.lr_decay", "retrain.lr_decay", "final.lr_decay"):
        parse_decay(cfg[key])
    if not 0 < cfg["data.labeled_fraction"] <= 1:
        raise ConfigError("data.labeled_fraction must be in (0, 1]")
    for key in ("poison.gamma_labeled", "poison.gamma_unlabeled"):
        if not 0 <= cfg[key] <= 1:
            raise ConfigError(f"{key} must be in [0, 1]")
    return cfg


def apply_overrides(cfg: dict, overrides: dict, source: str) -> dict:
    out = dict(cfg)
    for key, value in overrides.items():
        if key not in cfg:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        out[key] = _coerce(key, value, PROFILES["desk"].get(key, cfg[key]))
    return out


def parse_set(items) -> dict:
    """``["a.b=1", "c=x"]`` -> ``{"a.b": 1, "c": "x"}`` with YAML scalar typing."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: {exc}") from None
    return out


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of config keys")
    data = flatten(data)
    profile = data.pop("profile", None)
    return {"profile": profile, "values": data}


def resolve(profile: str = "desk", path=None, overrides=None) -> dict:
    file_values, file_profile = {}, None
    if path is not None:
        loaded = load_file(path)
        file_values, file_profile = loaded["values"], loaded["profile"]
    name = file_profile or profile
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = copy.deepcopy(PROFILES[name])
    cfg = apply_overrides(cfg, file_values, str(path))
    cfg = apply_overrides(cfg, overrides or {}, "--set")
    cfg["profile"] = name
    return validate_with_profile(cfg)


def validate_with_profile(cfg: dict) -> dict:
    name = cfg.get("profile", "desk")
    body = {k: v for k, v in cfg.items() if k != "profile"}
    validate(body)
    return {"profile": name, **dict(sorted(body.items()))}


def dump(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(dict(cfg), sort_keys=True, default_flow_style=False))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def parse_decay(text: str) -> list:
    """``"100:0.5,200:0.5"`` -> ``[(100, 0.5), (200, 0.5)]``."""
    out = []
    for part in filter(None, (p.strip() for p in str(text).split(","))):
        try:
            epoch, factor = part.split(":")
            out.append((int(epoch), float(factor)))
        except ValueError:
            raise ConfigError(f"bad lr_decay entry {part!r}; expected epoch:factor") from None
    return out


def section(cfg: dict, prefix: str) -> dict:
    prefix = prefix.rstrip(".") + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
