"""Victim training: desk-scale substitutes for pretrained model zoos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .adapter import ModelAdapter, build_adapter
from .architectures import ARCHITECTURES
from .datasets import Corpus


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class VictimSpec:
    architecture_id: str
    num_classes: int
    train_dataset_id: str
    seed: int = 0

    def __post_init__(self):
        if self.architecture_id not in ARCHITECTURES:
            raise ValueError(f"unknown architecture_id {self.architecture_id!r}")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_victim(spec: VictimSpec, dataset: Corpus, epochs: int = 8,
                 batch_size: int = 64, lr: float = 1e-3,
                 model_id: str = "") -> ModelAdapter:
    """Train a victim from scratch; deterministic given the spec seed."""
    if dataset.labels is None or len(dataset) == 0:
        raise TrainingError("labeled, nonempty dataset required")
    n_present = len(np.unique(dataset.labels))
    if n_present < 2:
        raise TrainingError(f"dataset has {n_present} class(es); need >= 2")

    input_shape = dataset.images.shape[1:]
    adapter = build_adapter(spec.architecture_id, spec.num_classes,
                            input_shape, model_id=model_id, seed=spec.seed)
    net = adapter.network
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()

    images = torch.from_numpy(dataset.images)
    if dataset.task == "segmentation":
        labels = torch.from_numpy(dataset.labels)
    else:
        labels = torch.from_numpy(np.asarray(dataset.labels, dtype=np.int64))

    rng = np.random.default_rng(spec.seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        for idx in _batches(len(dataset), batch_size, rng):
            xb = images[idx].permute(0, 3, 1, 2)
            logits = net.forward_with_activations(xb)["logits"]
            loss = loss_fn(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return adapter


def top1_accuracy(adapter: ModelAdapter, dataset: Corpus,
                  batch_size: int = 256) -> float:
    """Mean top-1 accuracy (mean pixel accuracy for segmentation)."""
    if dataset.labels is None:
        raise TrainingError("labeled dataset required")
    hits = 0
    total = 0
    for start in range(0, len(dataset), batch_size):
        pred = adapter.forward(dataset.images[start:start + batch_size])
        ref = dataset.labels[start:start + batch_size]
        hits += int((pred == ref).sum())
        total += int(np.prod(np.shape(ref)))
    return hits / total
