"""Desk-scale image corpora.

Three synthetic generators stand in for the usual benchmark datasets:

* ``desk10`` -- 10-class 32x32 classification set. Each class is an
  oriented sinusoidal grating with class-specific frequency, drawn over a
  smooth noisy background with per-image phase/amplitude/tint jitter.
* ``deskseg`` -- per-pixel labelled set: colored shapes (classes 1..K)
  on a background class 0.
* ``deskblob`` -- unrelated blobby texture images used as the substitute
  validation set during crafting (never in the loss).

Corpora also round-trip through a directory-of-PNGs layout with a
manifest.json listing (image_path, label_path, split) records.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


class IngestionError(ValueError):
    pass


@dataclass
class Corpus:
    """In-memory image corpus. ``labels`` is (N,) int for classification,
    (N, H, W) int maps for segmentation, or None."""

    images: np.ndarray  # (N, H, W, C) float32 in [0, 255]
    labels: np.ndarray | None
    num_classes: int
    task: str  # classification | segmentation | unlabeled

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Corpus":
        labels = None if self.labels is None else self.labels[idx]
        return Corpus(self.images[idx], labels, self.num_classes, self.task)


def _background(rng, hw, mean=127.5, rough=12.0, smooth=4.0):
    h, w = hw
    bg = rng.normal(0.0, rough, size=(h, w))
    bg = gaussian_filter(bg, smooth, mode="wrap")
    return mean + bg


def make_desk10(n: int, seed: int, hw=(32, 32), num_classes: int = 10) -> Corpus:
    """Classification corpus of oriented color gratings over cluttered,
    posterized backgrounds.

    The nuisance structure is deliberate: strong smooth background fields
    and random global brightness/tint offsets force the classifier to key
    on the grating pattern rather than absolute intensity, and pixel
    values sit at 3-bit quantization-bin centers (plus light noise), so
    the corpus behaves sensibly under the input-transformation defenses.
    The class signal itself stays moderate so a max-norm-10 perturbation
    is meaningful but random noise is not."""
    rng = np.random.default_rng(seed)
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, h, w, 3), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        k = labels[i]
        angle = np.pi * k / num_classes + rng.normal(0.0, 0.06)
        freq = (2.0 + 0.9 * (k % 5)) / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(10.0, 20.0)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle)
                                          + yy * np.sin(angle)) + phase)
        # class-dependent chroma direction plus a mild random tint
        col = 2 * np.pi * k / num_classes
        cvec = np.array([np.cos(col), np.cos(col + 2.1), np.cos(col + 4.2)])
        tint = rng.uniform(0.9, 1.1, size=3) + 0.8 * cvec
        base = (rng.uniform(-45.0, 45.0)
                + _background(rng, hw, rough=60.0, smooth=2.0)
                + _background(rng, hw, mean=0.0, rough=90.0, smooth=5.0))
        for c in range(3):
            chan = base + rng.uniform(-12.0, 12.0) + amp * tint[c] * wave
            # snap to 3-bit bin centers; keeps the corpus stable under
            # bit-depth reduction
            chan = 32.0 * np.floor(chan / 32.0) + 16.0
            images[i, :, :, c] = chan + rng.normal(0, 3.0, size=(h, w))
    impulses = rng.random(images.shape) < 0.02
    n_imp = int(impulses.sum())
    images[impulses] += (rng.uniform(20.0, 40.0, size=n_imp)
                         * rng.choice([-1.0, 1.0], size=n_imp))
    np.clip(images, 0, 255, out=images)
    return Corpus(images, labels.astype(np.int64), num_classes, "classification")


def make_deskseg(n: int, seed: int, hw=(32, 32), num_classes: int = 6,
                 max_shapes: int = 3, min_shapes: int = 1) -> Corpus:
    """Segmentation corpus: class 0 is background, 1..num_classes-1 are
    shape classes with distinctive colors plus texture."""
    rng = np.random.default_rng(seed)
    h, w = hw
    palette = 127.5 + 95.0 * np.stack(
        [np.cos(2 * np.pi * np.arange(num_classes) / num_classes + o)
         for o in (0.0, 2.1, 4.2)], axis=1)  # (num_classes, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((n, h, w, 3), dtype=np.float32)
    maps = np.zeros((n, h, w), dtype=np.int64)
    for i in range(n):
        img = np.stack([_background(rng, hw)] * 3, axis=-1)
        lab = np.zeros((h, w), dtype=np.int64)
        for _ in range(rng.integers(min_shapes, max_shapes + 1)):
            cls = int(rng.integers(1, num_classes))
            cy, cx = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
            r = rng.uniform(4, 11)
            if rng.random() < 0.5:
                mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.8)
            else:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
            color = palette[cls] + rng.normal(0, 10.0, size=3)
            img[mask] = color + rng.normal(0, 6.0, size=(mask.sum(), 3))
            lab[mask] = cls
        images[i] = img
        maps[i] = lab
    np.clip(images, 0, 255, out=images)
    return Corpus(images, maps, num_classes, "segmentation")


def make_deskblob(n: int, seed: int, hw=(32, 32)) -> Corpus:
    """Unrelated substitute images: smoothed colored blob fields."""
    rng = np.random.default_rng(seed)
    h, w = hw
    images = np.empty((n, h, w, 3), dtype=np.float32)
    for i in range(n):
        field = rng.normal(0, 1, size=(h, w, 3))
        sigma = rng.uniform(1.0, 3.5)
        for c in range(3):
            field[:, :, c] = gaussian_filter(field[:, :, c], sigma, mode="wrap")
        field /= np.abs(field).max() + 1e-9
        center = rng.uniform(80, 175, size=3)
        spread = rng.uniform(45, 80)
        images[i] = center + spread * field
    np.clip(images, 0, 255, out=images)
    return Corpus(images, None, 0, "unlabeled")


_GENERATORS = {
    "desk10": make_desk10,
    "deskseg": make_deskseg,
    "deskblob": make_deskblob,
}


def make_synthetic(kind: str, n: int, seed: int, **kw) -> Corpus:
    if kind not in _GENERATORS:
        raise IngestionError(f"unknown synthetic corpus kind: {kind!r}")
    return _GENERATORS[kind](n, seed, **kw)


# -- directory layout -----------------------------------------------------

def materialize(corpus: Corpus, root, split: str = "train") -> Path:
    """Write a corpus as PNGs plus a manifest.json; returns manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.json"
    records = []
    if manifest_path.exists():
        records = json.loads(manifest_path.read_text())["records"]
    have_maps = corpus.task == "segmentation"
    if have_maps:
        (root / "labels").mkdir(exist_ok=True)
    for i in range(len(corpus)):
        name = f"{split}_{i:05d}.png"
        img = np.round(corpus.images[i]).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / name)
        rec = {"image_path": f"images/{name}", "split": split}
        if have_maps:
            Image.fromarray(corpus.labels[i].astype(np.uint8)).save(
                root / "labels" / name)
            rec["label_path"] = f"labels/{name}"
        elif corpus.labels is not None:
            rec["label"] = int(corpus.labels[i])
        records.append(rec)
    manifest_path.write_text(json.dumps(
        {"num_classes": corpus.num_classes, "task": corpus.task,
         "records": records}, indent=1))
    return manifest_path


def load_corpus(root, split: str | None = None) -> Corpus:
    """Read a manifest-described directory back into memory."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    records = [r for r in manifest["records"]
               if split is None or r.get("split") == split]
    if not records:
        raise IngestionError(f"no records for split {split!r} in {manifest_path}")
    images, labels = [], []
    for rec in records:
        img = np.asarray(Image.open(root / rec["image_path"]).convert("RGB"),
                         dtype=np.float32)
        images.append(img)
        if "label_path" in rec:
            labels.append(np.asarray(Image.open(root / rec["label_path"]),
                                     dtype=np.int64))
        elif "label" in rec:
            labels.append(rec["label"])
    images = np.stack(images)
    task = manifest.get("task", "classification")
    lab = None
    if labels:
        lab = (np.stack(labels) if task == "segmentation"
               else np.asarray(labels, dtype=np.int64))
    return Corpus(images, lab, manifest.get("num_classes", 0), task)
