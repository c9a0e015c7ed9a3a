"""Reference victim architectures and their layer catalogs.

Three desk-scale networks are provided:

* ``small_conv_a`` -- plain 4-conv classifier with two fc layers.
* ``small_conv_b`` -- 6 convs arranged as three two-conv residual blocks
  (block-end layers tagged) followed by one fc layer.
* ``toy_fcn`` -- fully convolutional per-pixel classifier: 4 convs, a 1x1
  head and bilinear upsampling back to input resolution.

All networks take inputs in [0, 255]; normalization happens in the first
module so callers never mean-subtract.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

ARCHITECTURES = ("small_conv_a", "small_conv_b", "toy_fcn")


@dataclass(frozen=True)
class CatalogEntry:
    layer_id: str
    kind: str  # conv | block_end | fc | other
    output_shape: tuple


class _Normalize(nn.Module):
    """Map [0, 255] pixels to roughly unit scale."""

    def forward(self, x):
        return (x - 127.5) / 127.5


class SmallConvA(nn.Module):
    def __init__(self, num_classes: int, in_channels: int = 3,
                 input_hw: tuple = (32, 32)):
        super().__init__()
        self.norm = _Normalize()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool1 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv4 = nn.Conv2d(32, 64, 3, padding=1)
        self.pool2 = nn.MaxPool2d(2)
        self.relu = nn.ReLU()
        flat = 64 * (input_hw[0] // 4) * (input_hw[1] // 4)
        self.fc1 = nn.Linear(flat, 128)
        self.fc2 = nn.Linear(128, num_classes)

    def forward(self, x):
        return self.forward_with_activations(x)["logits"]

    def forward_with_activations(self, x):
        x = self.norm(x)
        a1 = self.relu(self.conv1(x))
        a2 = self.pool1(self.relu(self.conv2(a1)))
        a3 = self.relu(self.conv3(a2))
        a4 = self.pool2(self.relu(self.conv4(a3)))
        f1 = self.relu(self.fc1(a4.flatten(1)))
        logits = self.fc2(f1)
        return {"conv1": a1, "conv2": a2, "conv3": a3, "conv4": a4,
                "fc1": f1, "logits": logits}

    @staticmethod
    def catalog_kinds():
        return [("conv1", "conv"), ("conv2", "conv"), ("conv3", "conv"),
                ("conv4", "conv"), ("fc1", "fc"), ("logits", "fc")]


class _SkipBlock(nn.Module):
    """Two 3x3 convs with a 1x1 projected skip; ReLU after the add."""

    def __init__(self, cin, cout, downsample=False):
        super().__init__()
        stride = 2 if downsample else 1
        self.conv_a = nn.Conv2d(cin, cout, 3, padding=1, stride=stride)
        self.conv_b = nn.Conv2d(cout, cout, 3, padding=1)
        self.proj = nn.Conv2d(cin, cout, 1, stride=stride)
        self.relu = nn.ReLU()

    def forward(self, x):
        inner = self.relu(self.conv_a(x))
        out = self.relu(self.conv_b(inner) + self.proj(x))
        return inner, out


class SmallConvB(nn.Module):
    def __init__(self, num_classes: int, in_channels: int = 3):
        super().__init__()
        self.norm = _Normalize()
        self.block1 = _SkipBlock(in_channels, 16)
        self.block2 = _SkipBlock(16, 32, downsample=True)
        self.block3 = _SkipBlock(32, 64, downsample=True)
        self.fc = nn.Linear(64, num_classes)

    def forward(self, x):
        return self.forward_with_activations(x)["logits"]

    def forward_with_activations(self, x):
        x = self.norm(x)
        i1, b1 = self.block1(x)
        i2, b2 = self.block2(b1)
        i3, b3 = self.block3(b2)
        pooled = b3.mean(dim=(2, 3))
        logits = self.fc(pooled)
        return {"block1_inner": i1, "block1_out": b1,
                "block2_inner": i2, "block2_out": b2,
                "block3_inner": i3, "block3_out": b3,
                "logits": logits}

    @staticmethod
    def catalog_kinds():
        # inner convs are observable but not optimization targets: for
        # block architectures only block-end outputs are maximized
        return [("block1_inner", "other"), ("block1_out", "block_end"),
                ("block2_inner", "other"), ("block2_out", "block_end"),
                ("block3_inner", "other"), ("block3_out", "block_end"),
                ("logits", "fc")]


class ToyFCN(nn.Module):
    def __init__(self, num_classes: int, in_channels: int = 3):
        super().__init__()
        self.norm = _Normalize()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1, stride=2)
        self.conv3 = nn.Conv2d(32, 32, 3, padding=1)
        self.conv4 = nn.Conv2d(32, 64, 3, padding=1, stride=2)
        self.head = nn.Conv2d(64, num_classes, 1)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.forward_with_activations(x)["logits"]

    def forward_with_activations(self, x):
        size = x.shape[2:]
        x = self.norm(x)
        a1 = self.relu(self.conv1(x))
        a2 = self.relu(self.conv2(a1))
        a3 = self.relu(self.conv3(a2))
        a4 = self.relu(self.conv4(a3))
        logits = nn.functional.interpolate(
            self.head(a4), size=size, mode="bilinear", align_corners=False)
        return {"conv1": a1, "conv2": a2, "conv3": a3, "conv4": a4,
                "logits": logits}

    @staticmethod
    def catalog_kinds():
        return [("conv1", "conv"), ("conv2", "conv"), ("conv3", "conv"),
                ("conv4", "conv"), ("logits", "other")]


def build_network(architecture_id: str, num_classes: int,
                  in_channels: int = 3, input_hw: tuple = (32, 32)) -> nn.Module:
    if architecture_id == "small_conv_a":
        return SmallConvA(num_classes, in_channels, input_hw)
    if architecture_id == "small_conv_b":
        return SmallConvB(num_classes, in_channels)
    if architecture_id == "toy_fcn":
        return ToyFCN(num_classes, in_channels)
    raise ValueError(f"unknown architecture_id: {architecture_id!r}")


def task_of(architecture_id: str) -> str:
    return "segmentation" if architecture_id == "toy_fcn" else "classification"
