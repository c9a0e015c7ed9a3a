"""Uniform victim-model interface.

A :class:`ModelAdapter` wraps a frozen torch network and exposes exactly
three capabilities to the rest of the toolkit: predictions, named-layer
activations (post-nonlinearity) and gradients of a scalar loss with
respect to the input. Inputs are always numpy arrays shaped (N, H, W, C)
with pixels in [0, 255]; any normalization is internal.

Also implements the "UAPW" single-file weight container.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .architectures import build_network, task_of

_MAGIC = b"UAPW"


class CatalogError(KeyError):
    """Raised for layer ids not present in the adapter's catalog."""


class InvalidInputError(ValueError):
    """Raised when an input batch does not match the adapter contract."""


@dataclass(frozen=True)
class LayerCatalog:
    """Ordered layer registry: (layer_id, kind, output_shape) triples."""

    entries: tuple

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate layer_ids in catalog")
        if not any(e[1] in ("conv", "block_end") for e in self.entries):
            raise ValueError("catalog needs at least one conv/block_end layer")

    def ids(self) -> list:
        return [e[0] for e in self.entries]

    def kinds(self) -> dict:
        return {e[0]: e[1] for e in self.entries}

    def optimization_layers(self) -> list:
        """Layers the crafting objective maximizes: convs and block ends."""
        return [e[0] for e in self.entries if e[1] in ("conv", "block_end")]

    def depth_of(self, layer_id: str) -> int:
        for i, e in enumerate(self.entries):
            if e[0] == layer_id:
                return i
        raise CatalogError(layer_id)

    def to_json(self) -> list:
        return [[e[0], e[1], list(e[2])] for e in self.entries]

    @staticmethod
    def from_json(data: list) -> "LayerCatalog":
        return LayerCatalog(tuple((e[0], e[1], tuple(e[2])) for e in data))


@dataclass
class ModelAdapter:
    """Frozen victim network with a uniform numpy-facing interface.

    Immutable after construction; forward/activations/input_gradient are
    safe to call concurrently (read-only on the network).
    """

    model_id: str
    architecture_id: str
    num_classes: int
    input_shape: tuple  # (H, W, C)
    task: str  # classification | segmentation
    catalog: LayerCatalog
    network: torch.nn.Module
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.network.eval()
        for p in self.network.parameters():
            p.requires_grad_(False)

    # -- internal helpers -------------------------------------------------

    def _dtype(self):
        return next(self.network.parameters()).dtype

    def _to_torch(self, x: np.ndarray) -> torch.Tensor:
        x = np.asarray(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise InvalidInputError(
                f"expected batch shaped (N, {self.input_shape[0]}, "
                f"{self.input_shape[1]}, {self.input_shape[2]}), got {x.shape}")
        t = torch.from_numpy(np.ascontiguousarray(x)).to(self._dtype())
        return t.permute(0, 3, 1, 2)  # NHWC -> NCHW

    def _run(self, xt: torch.Tensor) -> dict:
        return self.network.forward_with_activations(xt)

    # -- public interface -------------------------------------------------

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Pre-argmax scores: (N, num_classes) or (N, C, H, W) logits."""
        with torch.no_grad():
            return self._run(self._to_torch(x))["logits"].numpy()

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Predicted labels; per-pixel maps for segmentation.

        Argmax ties break to the lowest class index.
        """
        logits = self.scores(x)
        return np.argmax(logits, axis=1)

    def activations(self, x: np.ndarray, layer_ids: Sequence[str]) -> list:
        """Post-nonlinearity outputs at the named layers, numpy NCHW."""
        known = set(self.catalog.ids())
        for lid in layer_ids:
            if lid not in known:
                raise CatalogError(lid)
        if not layer_ids:
            return []
        with torch.no_grad():
            acts = self._run(self._to_torch(x))
        return [acts[lid].numpy() for lid in layer_ids]

    def input_gradient(self, loss_value_fn: Callable[[dict], torch.Tensor],
                       x: np.ndarray, clamp_input: tuple | None = None
                       ) -> np.ndarray:
        """Gradient of a scalar loss of the activations w.r.t. the input.

        ``loss_value_fn`` receives the {layer_id: tensor} activation dict
        and must return a scalar torch tensor. With ``clamp_input`` the
        batch is clamped to that range inside the graph, so the returned
        gradient is w.r.t. the pre-clamp values (zero where clamped).
        """
        xt = self._to_torch(x).clone().requires_grad_(True)
        fed = torch.clamp(xt, *clamp_input) if clamp_input else xt
        loss = loss_value_fn(self._run(fed))
        if loss.dim() != 0:
            raise InvalidInputError("loss_value_fn must return a scalar")
        loss.backward()
        return xt.grad.permute(0, 2, 3, 1).numpy()

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        save_weights(self, path)


def make_catalog(network, architecture_id: str, input_shape: tuple,
                 dtype=torch.float32) -> LayerCatalog:
    h, w, c = input_shape
    probe = torch.zeros(1, c, h, w, dtype=dtype)
    with torch.no_grad():
        acts = network.forward_with_activations(probe)
    entries = []
    for layer_id, kind in network.catalog_kinds():
        entries.append((layer_id, kind, tuple(acts[layer_id].shape[1:])))
    return LayerCatalog(tuple(entries))


def build_adapter(architecture_id: str, num_classes: int, input_shape: tuple,
                  model_id: str = "", seed: int = 0,
                  dtype=torch.float32) -> ModelAdapter:
    """Construct an adapter with freshly initialized weights."""
    torch.manual_seed(seed)
    net = build_network(architecture_id, num_classes,
                        in_channels=input_shape[2],
                        input_hw=input_shape[:2]).to(dtype)
    catalog = make_catalog(net, architecture_id, input_shape, dtype)
    return ModelAdapter(
        model_id=model_id or f"{architecture_id}_s{seed}",
        architecture_id=architecture_id,
        num_classes=num_classes,
        input_shape=tuple(input_shape),
        task=task_of(architecture_id),
        catalog=catalog,
        network=net,
        seed=seed,
    )


# -- UAPW weight container ------------------------------------------------

def _write_prefixed_json(fh, obj) -> None:
    blob = json.dumps(obj, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_prefixed_json(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(n).decode())


def save_weights(adapter: ModelAdapter, path) -> None:
    """Write a UAPW container: magic, JSON header, then each parameter as
    a length-prefixed JSON shape record followed by raw f32 LE values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "model_id": adapter.model_id,
        "architecture_id": adapter.architecture_id,
        "num_classes": adapter.num_classes,
        "input_shape": list(adapter.input_shape),
        "seed": adapter.seed,
        "catalog": adapter.catalog.to_json(),
    }
    state = adapter.network.state_dict()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        _write_prefixed_json(fh, header)
        for name, tensor in state.items():
            arr = tensor.detach().numpy().astype("<f4")
            _write_prefixed_json(fh, {"name": name, "shape": list(arr.shape)})
            fh.write(arr.tobytes())


def load_weights(path) -> ModelAdapter:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a UAPW weight file")
        header = _read_prefixed_json(fh)
        state = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (n,) = struct.unpack("<I", raw)
            rec = json.loads(fh.read(n).decode())
            count = int(np.prod(rec["shape"])) if rec["shape"] else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4")
            state[rec["name"]] = torch.from_numpy(
                arr.reshape(rec["shape"]).copy())
    input_shape = tuple(header["input_shape"])
    net = build_network(header["architecture_id"], header["num_classes"],
                        in_channels=input_shape[2], input_hw=input_shape[:2])
    net.load_state_dict(state)
    return ModelAdapter(
        model_id=header["model_id"],
        architecture_id=header["architecture_id"],
        num_classes=header["num_classes"],
        input_shape=input_shape,
        task=task_of(header["architecture_id"]),
        catalog=LayerCatalog.from_json(header["catalog"]),
        network=net,
        seed=header["seed"],
    )
