"""Mechanistic studies of how a crafted perturbation moves activations.

Covers the per-layer relative activation shift profile, the correlation
between the perturbation-alone response norm and the response change it
causes on real inputs, and the shift-vs-fooling summary table.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .adapter import ModelAdapter
from .crafting import Perturbation, perturbed_predictions
from .metrics import fooling_rate


@dataclass
class ShiftProfile:
    per_layer: list  # (layer_id, mean relative shift in percent)
    n_samples: int
    n_skipped: int = 0


@dataclass
class CorrelationTrace:
    points: list  # (||f(x+d) - f(x)||_2, ||f(d)||_2) per recorded iteration
    pearson_r: float | None
    degenerate: bool = False
    uniform_fallback: bool = False


def layer_shift_profile(adapter: ModelAdapter, perturbation: Perturbation,
                        sample_set: np.ndarray, layer_ids=None,
                        batch_size: int = 64) -> ShiftProfile:
    """Mean over samples of 100 * ||l_i(x+d) - l_i(x)||_2 / ||l_i(x)||_2
    per layer. Samples with a zero-norm clean activation are skipped and
    counted."""
    if len(sample_set) == 0:
        raise ValueError("sample_set must be nonempty")
    if layer_ids is None:
        layer_ids = adapter.catalog.ids()
    sums = np.zeros(len(layer_ids))
    counts = np.zeros(len(layer_ids), dtype=int)
    skipped = 0
    for start in range(0, len(sample_set), batch_size):
        x = np.asarray(sample_set[start:start + batch_size])
        xa = np.clip(x + perturbation.delta[None], 0.0, 255.0)
        clean = adapter.activations(x, layer_ids)
        adv = adapter.activations(xa, layer_ids)
        for i, (c, a) in enumerate(zip(clean, adv)):
            cn = np.linalg.norm(c.reshape(len(c), -1), axis=1)
            dn = np.linalg.norm((a - c).reshape(len(c), -1), axis=1)
            ok = cn > 0
            skipped += int((~ok).sum()) if i == 0 else 0
            sums[i] += (100.0 * dn[ok] / cn[ok]).sum()
            counts[i] += int(ok.sum())
    per_layer = [(lid, float(sums[i] / max(counts[i], 1)))
                 for i, lid in enumerate(layer_ids)]
    return ShiftProfile(per_layer=per_layer, n_samples=len(sample_set),
                        n_skipped=skipped)


def _final_response(adapter: ModelAdapter, x: np.ndarray,
                    layer_id: str) -> np.ndarray:
    (act,) = adapter.activations(x, [layer_id])
    return act.reshape(len(act), -1)


def correlation_trace(snapshots: list, adapter: ModelAdapter,
                      probe_batch: np.ndarray,
                      final_layer: str | None = None,
                      min_points: int = 3,
                      fallback_deltas: list | None = None) -> CorrelationTrace:
    """Pearson correlation between ||f(x+d_t) - f(x)||_2 and ||f(d_t)||_2
    over recorded crafting snapshots (taken just before each rescale).

    ``snapshots`` is a list of (iteration, delta) pairs; with fewer than
    ``min_points`` of them, ``fallback_deltas`` (uniformly sampled
    iterations) is used instead and the trace is flagged.
    """
    if final_layer is None:
        final_layer = adapter.catalog.optimization_layers()[-1]
    deltas = [d for _, d in snapshots]
    fallback = False
    if len(deltas) < min_points:
        deltas = [d for _, d in (fallback_deltas or [])]
        fallback = True
    if len(deltas) < min_points:
        raise ValueError("need at least 3 recorded iterations")
    x = probe_batch.astype(np.float32)
    f_clean = _final_response(adapter, x, final_layer)
    points = []
    for d in deltas:
        f_adv = _final_response(adapter, np.clip(x + d[None], 0, 255),
                                final_layer)
        f_delta = _final_response(adapter, d[None].astype(np.float32),
                                  final_layer)
        change = float(np.linalg.norm(f_adv - f_clean, axis=1).mean())
        alone = float(np.linalg.norm(f_delta, axis=1).mean())
        points.append((change, alone))
    arr = np.asarray(points)
    if np.allclose(arr.std(axis=0), 0.0):
        return CorrelationTrace(points=points, pearson_r=None,
                                degenerate=True, uniform_fallback=fallback)
    r = float(stats.pearsonr(arr[:, 0], arr[:, 1])[0])
    return CorrelationTrace(points=points, pearson_r=r,
                            uniform_fallback=fallback)


def shift_vs_fooling_table(adapter: ModelAdapter, perturbations: dict,
                           test_images: np.ndarray,
                           classifier_input_layer: str | None = None) -> list:
    """Rows of (name, relative shift at the classifier's input layer in
    percent, fooling rate), ordered by fooling rate."""
    if classifier_input_layer is None:
        # last non-fc entry: the representation fed to the classifier head
        non_fc = [e[0] for e in adapter.catalog.entries if e[1] != "fc"]
        classifier_input_layer = non_fc[-1]
    clean_labels = perturbed_predictions(adapter, test_images, None)
    rows = []
    for name, pert in perturbations.items():
        profile = layer_shift_profile(adapter, pert, test_images,
                                      [classifier_input_layer])
        adv_labels = perturbed_predictions(adapter, test_images, pert.delta)
        rows.append({"name": name,
                     "relative_shift": profile.per_layer[0][1],
                     "fooling_rate": fooling_rate(adv_labels, clean_labels)})
    rows.sort(key=lambda r: r["fooling_rate"])
    return rows


def profile_to_csv(profile: ShiftProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["layer_id", "mean_relative_shift_percent"])
    for lid, shift in profile.per_layer:
        w.writerow([lid, f"{shift:.6g}"])
    return buf.getvalue()


def table_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["name", "relative_shift_percent", "fooling_rate"])
    for r in rows:
        w.writerow([r["name"], f"{r['relative_shift']:.6g}",
                    f"{r['fooling_rate']:.6g}"])
    return buf.getvalue()


def plot_profile(profile: ShiftProfile, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [lid for lid, _ in profile.per_layer]
    values = [v for _, v in profile.per_layer]
    ax.plot(range(len(values)), values, marker="o")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("relative activation shift (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_trace(trace: CorrelationTrace, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 5))
    arr = np.asarray(trace.points)
    ax.scatter(arr[:, 1], arr[:, 0])
    ax.set_xlabel("||f(delta)||_2")
    ax.set_ylabel("||f(x+delta) - f(x)||_2")
    if trace.pearson_r is not None:
        ax.set_title(f"pearson r = {trace.pearson_r:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
