"""Input-transformation defenses and the evaluation grid.

Each transform maps a [0, 255] image batch to a [0, 255] batch of the
same shape. 10-crop is the exception: cropping happens inside
``evaluate_defended``, which averages the victim's pre-argmax scores
over the 4 corner + center crops and their horizontal flips.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, median_filter, zoom

from .adapter import ModelAdapter
from .metrics import fooling_rate

TRANSFORM_KINDS = ("identity", "ten_crop", "gaussian_smooth", "median_smooth",
                   "bilateral", "bit_reduce", "jpeg")


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DefenseConfigError(f"unknown transform kind {self.kind!r}")
        p = self.params
        if self.kind == "gaussian_smooth" and p.get("sigma", 1.0) < 0:
            raise DefenseConfigError("sigma must be >= 0")
        if self.kind == "median_smooth" and p.get("k", 3) < 1:
            raise DefenseConfigError("window k must be >= 1")
        if self.kind == "bit_reduce":
            n = p.get("bits", 3)
            if not 1 <= n <= 7:
                raise DefenseConfigError("bits must be in 1..7")
        if self.kind == "jpeg":
            q = p.get("quality", 75)
            if not 1 <= q <= 100:
                raise DefenseConfigError("quality must be in 1..100")

    def label(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})" if inner else self.kind


def _bilateral_one(img: np.ndarray, sigma_spatial: float,
                   sigma_range: float) -> np.ndarray:
    """Plain O(H W k^2) bilateral filter; fine at desk image sizes."""
    radius = max(1, int(round(2 * sigma_spatial)))
    h, w, c = img.shape
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)),
                 mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    norm = np.zeros((h, w, 1), dtype=np.float64)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = pad[radius + dy:radius + dy + h,
                          radius + dx:radius + dx + w]
            sw = np.exp(-(dy * dy + dx * dx) / (2 * sigma_spatial ** 2))
            rdist = ((shifted - img) ** 2).sum(axis=2, keepdims=True)
            wgt = sw * np.exp(-rdist / (2 * sigma_range ** 2 * img.shape[2]))
            acc += wgt * shifted
            norm += wgt
    return acc / norm


def _jpeg_one(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(np.round(img).clip(0, 255).astype(np.uint8)).save(
        buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)


def bit_reduce_levels(bits: int):
    """Floor-quantization scheme: q = floor(x / step) with
    step = 256 / 2^bits, rescaled back onto [0, 255]."""
    step = 256.0 / (2 ** bits)
    scale = 255.0 / (2 ** bits - 1)
    return step, scale


def apply(t: TransformSpec, x: np.ndarray) -> np.ndarray:
    """Transform a (N, H, W, C) batch; output stays in [0, 255] with the
    same shape (ten_crop and identity pass through unchanged)."""
    x = np.asarray(x, dtype=np.float32)
    p = t.params
    if t.kind in ("identity", "ten_crop"):
        return x.copy()
    if t.kind == "gaussian_smooth":
        sigma = p.get("sigma", 1.0)
        out = gaussian_filter(x, (0.0, sigma, sigma, 0.0), mode="nearest")
    elif t.kind == "median_smooth":
        k = int(p.get("k", 3))
        out = median_filter(x, size=(1, k, k, 1), mode="nearest")
    elif t.kind == "bilateral":
        ss = p.get("sigma_spatial", 3.0)
        sr = p.get("sigma_range", 30.0)
        out = np.stack([_bilateral_one(img, ss, sr) for img in x])
    elif t.kind == "bit_reduce":
        step, scale = bit_reduce_levels(int(p.get("bits", 3)))
        out = np.floor(np.clip(x, 0, 255) / step) * scale
    elif t.kind == "jpeg":
        out = np.stack([_jpeg_one(img, p.get("quality", 75)) for img in x])
    else:  # pragma: no cover
        raise DefenseConfigError(t.kind)
    return np.clip(out, 0.0, 255.0).astype(np.float32)


def _ten_crop_scores(adapter: ModelAdapter, x: np.ndarray,
                     crop_frac: float = 0.875) -> np.ndarray:
    """Average pre-argmax scores over 4 corner + center crops and their
    horizontal flips, each resized back to the victim input size."""
    n, h, w, c = x.shape
    ch, cw = max(1, int(round(h * crop_frac))), max(1, int(round(w * crop_frac)))
    offsets = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw),
               ((h - ch) // 2, (w - cw) // 2)]
    total = None
    for oy, ox in offsets:
        crop = x[:, oy:oy + ch, ox:ox + cw, :]
        resized = zoom(crop, (1, h / ch, w / cw, 1), order=1)[:, :h, :w, :]
        for batch in (resized, resized[:, :, ::-1, :]):
            s = adapter.scores(np.ascontiguousarray(batch))
            total = s if total is None else total + s
    return total / 10.0


def defended_predictions(adapter: ModelAdapter, t: TransformSpec,
                         x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    outs = []
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        if t.kind == "ten_crop":
            scores = _ten_crop_scores(adapter, chunk,
                                      t.params.get("crop_frac", 0.875))
        else:
            scores = adapter.scores(apply(t, chunk))
        outs.append(np.argmax(scores, axis=1))
    return np.concatenate(outs)


def evaluate_defended(adapter: ModelAdapter, t: TransformSpec,
                      perturbations: dict, test_images: np.ndarray,
                      test_labels: np.ndarray | None = None) -> dict:
    """One grid row: clean accuracy under the defense plus the fooling
    rate of each perturbation, measured against defended clean
    predictions (not raw ones)."""
    if len(test_images) == 0:
        raise DefenseConfigError("empty test set")
    clean_pred = defended_predictions(adapter, t, test_images)
    row = {"transform": t.kind, "params": dict(t.params)}
    if test_labels is not None:
        row["clean_top1"] = float((clean_pred == test_labels).mean())
    fools = {}
    for name, pert in perturbations.items():
        adv = np.clip(test_images + pert.delta[None], 0.0, 255.0)
        adv_pred = defended_predictions(adapter, t, adv)
        fools[name] = fooling_rate(adv_pred, clean_pred)
    row["fooling"] = fools
    return row


def grid_to_csv(rows: list) -> str:
    """CSV rendering: transform, params, clean_top1, one column per
    perturbation variant."""
    variants = sorted({v for r in rows for v in r["fooling"]})
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["transform", "params", "clean_top1"]
                    + [f"fool_{v}" for v in variants])
    for r in rows:
        params = ";".join(f"{k}={v}" for k, v in sorted(r["params"].items()))
        writer.writerow(
            [r["transform"], params, f"{r.get('clean_top1', float('nan')):.6g}"]
            + [f"{r['fooling'].get(v, float('nan')):.6g}" for v in variants])
    return buf.getvalue()


def grid_from_csv(text: str) -> list:
    """Parse and validate the grid CSV back into row dicts."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:3] != ["transform", "params", "clean_top1"]:
        raise DefenseConfigError("bad grid CSV header")
    variants = [h[len("fool_"):] for h in header[3:]]
    rows = []
    for line in reader:
        params = {}
        if line[1]:
            for kv in line[1].split(";"):
                k, v = kv.split("=")
                params[k] = float(v) if "." in v else int(float(v))
        rows.append({"transform": line[0], "params": params,
                     "clean_top1": float(line[2]),
                     "fooling": {v: float(x)
                                 for v, x in zip(variants, line[3:])}})
    return rows
