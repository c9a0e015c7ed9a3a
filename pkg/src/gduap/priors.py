"""Optimization-time input streams for the three prior regimes.

``none`` feeds zeros (the perturbation alone reaches the network),
``range`` feeds random augmented crops of a single oversized Gaussian
pseudo-image matched to the data mean and dynamic range, and ``data``
feeds real samples from the target distribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, rotate

from .datasets import Corpus

# Two-sided standard normal quantile putting 99.9% of mass inside the
# pixel range: Phi^-1(0.9995).
RANGE_QUANTILE = 3.2905


class PriorError(ValueError):
    pass


class CurationError(ValueError):
    pass


@dataclass
class AugmentSpec:
    crop: bool = True
    blur_sigma_range: tuple = (0.0, 3.0)
    rotation_degrees_range: tuple = (-10.0, 10.0)

    def __post_init__(self):
        for lo, hi in (self.blur_sigma_range, self.rotation_degrees_range):
            if hi < lo:
                raise ValueError("empty augmentation range")


@dataclass
class PriorSource:
    """Single-consumer sample stream; see :func:`sample`."""

    mode: str  # none | range | data
    input_shape: tuple  # (H, W, C)
    mean: np.ndarray | None = None  # per-channel, range mode
    sigma: np.ndarray | None = None
    canvas: np.ndarray | None = None  # (2H, 2W, C), range mode
    stream: Corpus | None = None  # data mode
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    augment_data: bool = False  # augmentations off for data mode by default
    _cursor: int = 0


def build_none_prior(input_shape) -> PriorSource:
    return PriorSource(mode="none", input_shape=tuple(input_shape))


def build_range_prior(mean, input_shape, seed: int) -> PriorSource:
    """Gaussian pseudo-data source. Sigma is chosen per channel so that
    99.9% of draws land inside [0, 255]; the canvas (one sample, twice
    the input size) is drawn once per source."""
    h, w, c = input_shape
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (c,)).copy()
    if np.any(mean <= 0) or np.any(mean >= 255):
        raise PriorError(f"degenerate sigma: channel mean {mean} at range edge")
    sigma = np.minimum(mean, 255.0 - mean) / RANGE_QUANTILE
    rng = np.random.default_rng(seed)
    canvas = rng.normal(mean, sigma, size=(2 * h, 2 * w, c)).astype(np.float32)
    return PriorSource(mode="range", input_shape=tuple(input_shape),
                       mean=mean, sigma=sigma, canvas=canvas)


def build_data_prior(stream: Corpus, input_shape,
                     augment_data: bool = False) -> PriorSource:
    if len(stream) == 0:
        raise PriorError("empty data prior stream")
    if stream.images.shape[3] != input_shape[2]:
        raise PriorError("data prior channel count does not match victim")
    return PriorSource(mode="data", input_shape=tuple(input_shape),
                       stream=stream, augment_data=augment_data)


def _augment_one(img: np.ndarray, spec: AugmentSpec, rng) -> np.ndarray:
    deg = rng.uniform(*spec.rotation_degrees_range)
    if deg != 0.0:
        img = rotate(img, deg, reshape=False, order=1, mode="nearest")
    sig = rng.uniform(*spec.blur_sigma_range)
    if sig > 1e-3:
        img = gaussian_filter(img, (sig, sig, 0.0), mode="nearest")
    return img


def sample(prior: PriorSource, batch_size: int, rng: np.random.Generator
           ) -> np.ndarray:
    """Next batch of prior images, shaped (batch, H, W, C).

    none: zeros. range: random canvas crops, each independently rotated
    and blurred. data: next stream batch (wraps around), unaugmented
    unless ``augment_data`` is set.
    """
    h, w, c = prior.input_shape
    if prior.mode == "none":
        return np.zeros((batch_size, h, w, c), dtype=np.float32)
    if prior.mode == "range":
        out = np.empty((batch_size, h, w, c), dtype=np.float32)
        ch, cw = prior.canvas.shape[:2]
        for b in range(batch_size):
            if prior.augment.crop:
                oy = rng.integers(0, ch - h + 1)
                ox = rng.integers(0, cw - w + 1)
            else:
                oy = ox = 0
            crop = prior.canvas[oy:oy + h, ox:ox + w]
            out[b] = _augment_one(crop, prior.augment, rng)
        return out
    if prior.mode == "data":
        images = prior.stream.images
        idx = (prior._cursor + np.arange(batch_size)) % len(images)
        prior._cursor = int((prior._cursor + batch_size) % len(images))
        batch = images[idx].astype(np.float32, copy=True)
        if prior.augment_data:
            for b in range(batch_size):
                batch[b] = _augment_one(batch[b], prior.augment, rng)
        return batch
    raise PriorError(f"unknown prior mode {prior.mode!r}")


def curate_less_bg(dataset: Corpus, bg_class: int = 0,
                   threshold: float = 0.5):
    """Keep segmentation samples whose background fraction is below the
    threshold; returns (filtered corpus, stats dict)."""
    if dataset.task != "segmentation" or dataset.labels is None:
        raise CurationError("per-pixel labels required")
    fracs = (dataset.labels == bg_class).mean(axis=(1, 2))
    keep = fracs < threshold
    stats = {
        "n_input": int(len(dataset)),
        "n_kept": int(keep.sum()),
        "bg_fraction_input": float(fracs.mean()),
        "bg_fraction_kept": float(fracs[keep].mean()) if keep.any() else None,
    }
    if not keep.any():
        raise CurationError(f"curation removed every sample: {stats}")
    return dataset.subset(np.where(keep)[0]), stats
