"""Data-free universal perturbation crafting.

The objective drives every selected layer's post-ReLU response as high
as possible: loss = -sum_batch log(prod_i ||l_i(input)||_2), optimized
with ADAM on the shared perturbation under a hard max-norm clip, with
saturation-rate adaptive halving and patience-based selection of the
best perturbation by validation fooling rate.
"""
from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapter import ModelAdapter
from .metrics import fooling_rate
from .priors import PriorSource, sample

_MAGIC = b"UAPF"
_VERSION = 1
_LOG_EPS = 1e-10


@dataclass
class Perturbation:
    delta: np.ndarray  # (H, W, C) float32
    xi: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if float(np.abs(self.delta).max(initial=0.0)) > self.xi:
            raise ValueError("perturbation exceeds its max-norm budget")

    def save(self, path) -> None:
        save_perturbation(self, path)


@dataclass
class CraftConfig:
    xi: float = 10.0
    lr: float = 0.1
    theta: float = 1e-5
    patience_H: int = 10  # validation checkpoints
    val_every_saturating: int = 200
    val_every_quiet: int = 400
    max_iterations: int = 40000
    prior_mode: str = "none"  # none | range | data
    aggregation: str = "log_product"  # log_product | mean
    seed: int = 0
    batch_size: int | None = None  # default 16 with a prior, else 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_batch: int = 256

    def __post_init__(self):
        if not (self.xi > 0 and self.lr > 0 and self.theta > 0):
            raise ValueError("xi, lr, theta must be positive")
        if self.patience_H < 1:
            raise ValueError("patience_H must be >= 1")
        if self.val_every_saturating < 1 or self.val_every_quiet < 1:
            raise ValueError("validation cadences must be >= 1")
        if self.prior_mode not in ("none", "range", "data"):
            raise ValueError(f"bad prior_mode {self.prior_mode!r}")
        if self.aggregation not in ("log_product", "mean"):
            raise ValueError(f"bad aggregation {self.aggregation!r}")
        if self.batch_size is None:
            self.batch_size = 1 if self.prior_mode == "none" else 16


@dataclass
class SaturationMonitor:
    """Tracks the fraction of perturbation pixels pinned at +/-xi."""

    p_prev: float = 0.0
    p_curr: float = 0.0

    def update(self, delta: np.ndarray, xi: float) -> float:
        self.p_prev = self.p_curr
        # clipping makes the boundary exact, so equality is the right test
        self.p_curr = float(np.mean(np.abs(delta) == xi))
        return self.p_curr

    def decide(self, theta: float) -> str:
        return "rescale" if (self.p_curr - self.p_prev) < theta else "continue"

    def reset_after_rescale(self, delta: np.ndarray, xi: float) -> None:
        self.p_curr = float(np.mean(np.abs(delta) == xi))
        self.p_prev = self.p_curr


@dataclass
class CraftResult:
    best: Perturbation
    history: list  # (iteration, loss, p, validation_fooling_rate or None)
    rescale_events: list
    pre_rescale_snapshots: list  # (iteration, delta copy) just before halving
    uniform_snapshots: list  # periodic (iteration, delta copy) fallbacks
    truncated: bool = False


class AdamState:
    """Scalar-free ADAM recursion over the perturbation tensor."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, delta: np.ndarray, gradient: np.ndarray, xi: float
             ) -> np.ndarray:
        """Descend the gradient, then hard-clip to [-xi, xi]."""
        if gradient.shape != delta.shape:
            raise ValueError("gradient/delta shape mismatch")
        g = gradient.astype(np.float64)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        out = delta.astype(np.float64) - self.lr * m_hat / (np.sqrt(v_hat)
                                                            + self.eps)
        return np.clip(out, -xi, xi).astype(np.float32)


def _loss_terms(acts: dict, layer_ids, aggregation: str) -> torch.Tensor:
    """Scalar torch loss over an activation dict; summed over the batch."""
    total = None
    for lid in layer_ids:
        a = acts[lid].flatten(1)
        if aggregation == "log_product":
            term = -torch.log(a.norm(dim=1) + _LOG_EPS).sum()
        else:  # mean activation variant
            term = -a.mean(dim=1).sum()
        total = term if total is None else total + term
    return total


def activation_loss(adapter: ModelAdapter, input_batch: np.ndarray,
                    layer_ids, aggregation: str = "log_product") -> float:
    """Negative summed log-product of layer activation norms (or the
    mean-activation variant); lower means stronger activations."""
    if not layer_ids:
        raise ValueError("layer_ids must be nonempty")
    acts = adapter.activations(input_batch, layer_ids)
    tensors = {lid: torch.from_numpy(a) for lid, a in zip(layer_ids, acts)}
    return float(_loss_terms(tensors, layer_ids, aggregation))


def make_input(prior: PriorSource, delta: np.ndarray, batch_size: int,
               rng: np.random.Generator) -> np.ndarray:
    """Prior batch plus the broadcast perturbation. Prior-backed inputs
    are clipped to [0, 255]; the no-prior input is the raw perturbation."""
    g = sample(prior, batch_size, rng)
    x = g + delta[None]
    if prior.mode != "none":
        np.clip(x, 0.0, 255.0, out=x)
    return x


def random_baseline(shape, xi: float, seed: int) -> Perturbation:
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-xi, xi, size=shape).astype(np.float32)
    return Perturbation(delta, xi, meta={"kind": "random_baseline",
                                         "seed": seed})


def perturbed_predictions(adapter: ModelAdapter, images: np.ndarray,
                          delta: np.ndarray | None,
                          batch_size: int = 256) -> np.ndarray:
    """Victim predictions on images (+ delta, clipped to [0, 255])."""
    outs = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size].astype(np.float32)
        if delta is not None:
            x = np.clip(x + delta[None], 0.0, 255.0)
        outs.append(adapter.forward(x))
    return np.concatenate(outs)


def craft(adapter: ModelAdapter, config: CraftConfig, prior: PriorSource,
          substitute_set: np.ndarray, layer_ids=None,
          log_every: int = 0) -> CraftResult:
    """Full crafting loop with patience-based convergence.

    ``substitute_set`` is an unrelated image stack used only to measure
    validation fooling rate. Deterministic given ``config.seed``.
    """
    substitute_set = np.asarray(substitute_set, dtype=np.float32)
    if len(substitute_set) == 0:
        raise ValueError("substitute_set must be nonempty")
    if layer_ids is None:
        layer_ids = adapter.catalog.optimization_layers()

    xi = float(config.xi)
    rng = np.random.default_rng(config.seed)
    delta = rng.uniform(-xi, xi,
                        size=adapter.input_shape).astype(np.float32)
    adam = AdamState(config.lr, config.adam_beta1, config.adam_beta2,
                     config.adam_eps)
    monitor = SaturationMonitor()
    clean_sub_labels = perturbed_predictions(adapter, substitute_set, None,
                                             config.val_batch)

    history = []
    rescale_events = []
    snapshots = []
    uniform_snapshots = []
    uniform_stride = max(1, config.max_iterations // 24)
    # checkpoints: (iteration, fooling_rate, delta copy), newest last
    checkpoints = deque(maxlen=config.patience_H + 1)
    cadence = config.val_every_quiet
    rescaled_since_checkpoint = False
    truncated = True

    def validate(it):
        preds = perturbed_predictions(adapter, substitute_set,
                                      np.clip(delta, -xi, xi),
                                      config.val_batch)
        fr = fooling_rate(preds, clean_sub_labels)
        checkpoints.append((it, fr, delta.copy()))
        return fr

    for t in range(1, config.max_iterations + 1):
        x = make_input(prior, delta, config.batch_size, rng)
        clamp = None if prior.mode == "none" else (0.0, 255.0)
        grad_x = adapter.input_gradient(
            lambda acts: _loss_terms(acts, layer_ids, config.aggregation),
            x, clamp_input=clamp)
        grad = grad_x.sum(axis=0)  # shared delta broadcast over the batch
        delta = adam.step(delta, grad, xi)
        assert float(np.abs(delta).max()) <= xi, "max-norm invariant violated"

        p = monitor.update(delta, xi)
        # the rate test is meaningless while nothing has saturated yet
        if p > 0.0 and monitor.decide(config.theta) == "rescale":
            snapshots.append((t, delta.copy()))
            delta = delta / 2.0
            rescale_events.append(t)
            rescaled_since_checkpoint = True
            monitor.reset_after_rescale(delta, xi)
            p = monitor.p_curr

        if t % uniform_stride == 0:
            uniform_snapshots.append((t, delta.copy()))

        fr = None
        if t % cadence == 0:
            fr = validate(t)
            cadence = (config.val_every_saturating if rescaled_since_checkpoint
                       else config.val_every_quiet)
            rescaled_since_checkpoint = False
            if log_every:
                print(f"iter {t}: val fooling {fr:.4f}, p {p:.4f}")
            if (len(checkpoints) > config.patience_H
                    and fr < min(c[1] for c in list(checkpoints)[:-1])):
                truncated = False
                history.append((t, None, p, fr))
                break
        history.append((t, None, p, fr))

    if not checkpoints:
        validate(min(config.max_iterations, len(history)))
    best_it, best_fr, best_delta = max(checkpoints, key=lambda c: c[1])
    best = Perturbation(
        np.clip(best_delta, -xi, xi), xi,
        meta={"model_id": adapter.model_id, "prior_mode": config.prior_mode,
              "seed": config.seed, "iterations_run": len(history),
              "validation_fooling_rate": best_fr,
              "best_checkpoint_iteration": best_it,
              "truncated": truncated})
    return CraftResult(best=best, history=history,
                       rescale_events=rescale_events,
                       pre_rescale_snapshots=snapshots,
                       uniform_snapshots=uniform_snapshots,
                       truncated=truncated)


# -- UAPF perturbation container ------------------------------------------

def save_perturbation(p: Perturbation, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = p.meta
    header = {
        "shape": list(p.delta.shape),
        "dtype": "f32",
        "xi": p.xi,
        "model_id": meta.get("model_id", ""),
        "prior_mode": meta.get("prior_mode", ""),
        "seed": meta.get("seed", 0),
        "iterations_run": meta.get("iterations_run", 0),
        "validation_fooling_rate": meta.get("validation_fooling_rate"),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(p.delta, dtype="<f4").tobytes())


def load_perturbation(path) -> Perturbation:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a UAPF perturbation file")
        version = fh.read(1)[0]
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported UAPF version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        count = int(np.prod(header["shape"]))
        delta = np.frombuffer(fh.read(4 * count), dtype="<f4")
    delta = delta.reshape(header["shape"]).copy()
    meta = {k: header[k] for k in ("model_id", "prior_mode", "seed",
                                   "iterations_run",
                                   "validation_fooling_rate")}
    return Perturbation(delta, float(header["xi"]), meta=meta)
