"""Classifier architectures: a small CNN for desk runs, VGG-16 (batch-norm) and a
CIFAR-style ResNet-18. Every model normalizes its [0, 1] input internally and
exposes ``features`` (the backbone representation) and ``head``."""

from __future__ import annotations

import torch
from torch import nn

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class Normalize(nn.Module):
    def __init__(self, mean=CIFAR_MEAN, std=CIFAR_STD):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class Classifier(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, class_count: int):
        super().__init__()
        self.normalize = Normalize()
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.head = nn.Linear(feature_dim, class_count)

    def features(self, x):
        return self.backbone(self.normalize(x))

    def forward(self, x):
        return self.head(self.features(x))


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


def tiny_cnn_backbone(side: int, channels: int = 3, widths=(32, 64, 64)):
    if side % 8:
        raise ValueError(f"tiny_cnn needs an input side divisible by 8, got {side}")
    layers, cin = [], channels
    for w in widths:
        layers.append(_conv_block(cin, w))
        cin = w
    layers.append(nn.Flatten())
    return nn.Sequential(*layers), cin * (side // 8) ** 2


VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def vgg16_backbone(side: int, channels: int = 3):
    layers, cin = [], channels
    for v in VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2))
        else:
            layers += [nn.Conv2d(cin, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
            cin = v
    layers.append(nn.Flatten())
    return nn.Sequential(*layers), 512 * (side // 32) ** 2


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def resnet18_backbone(side: int, channels: int = 3):
    layers = [nn.Conv2d(channels, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True)]
    cin = 64
    for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
        cin = cout
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), 512


BACKBONES = {
    "tiny_cnn": tiny_cnn_backbone,
    "vgg16": vgg16_backbone,
    "resnet18": resnet18_backbone,
}


def build_backbone(arch: str, side: int, channels: int = 3):
    try:
        factory = BACKBONES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(BACKBONES)}") from None
    return factory(side, channels)


def build_classifier(arch: str, class_count: int, side: int, channels: int = 3) -> Classifier:
    backbone, dim = build_backbone(arch, side, channels)
    return Classifier(backbone, dim, class_count)
