"""Fooling-rate and task metrics.

The generalized fooling rate compares a model's predictions on perturbed
inputs against its own clean predictions (never the ground truth) with
respect to a bounded, higher-is-better performance metric M in [0, R]:
GFR(M) = (R - M(pred_adv, pred_clean)) / R.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricContractError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    name: str
    range_max: float  # R
    direction: str = "higher_better"

    def __post_init__(self):
        if self.range_max <= 0:
            raise ValueError("range_max must be positive")
        if self.direction not in ("higher_better", "lower_better"):
            raise ValueError(f"bad direction {self.direction!r}")


@dataclass
class MetricReport:
    clean: dict = field(default_factory=dict)
    adversarial: dict = field(default_factory=dict)
    gfr: dict = field(default_factory=dict)
    n_samples: int = 0

    def to_json(self) -> str:
        return dump_report({"clean": self.clean,
                            "adversarial": self.adversarial,
                            "gfr": self.gfr,
                            "n_samples": self.n_samples})


def _round6(v):
    if isinstance(v, dict):
        return {k: _round6(x) for k, x in sorted(v.items())}
    if isinstance(v, (list, tuple)):
        return [_round6(x) for x in v]
    if isinstance(v, float):
        return float(f"{v:.6g}")
    if isinstance(v, (np.floating, np.integer)):
        return _round6(v.item())
    return v


def dump_report(obj: dict) -> str:
    """Stable-key-order JSON with floats at 6 significant digits."""
    return json.dumps(_round6(obj), sort_keys=True, indent=1)


def gfr(metric: MetricSpec, metric_value_fn, pred_adv, pred_clean) -> float:
    """(R - M(pred_adv, pred_clean)) / R for a higher-is-better M."""
    if metric.direction != "higher_better":
        raise MetricContractError(
            "GFR is defined only for higher_better metrics")
    if len(pred_adv) != len(pred_clean):
        raise MetricContractError("prediction sets differ in length")
    m = float(metric_value_fn(pred_adv, pred_clean))
    return (metric.range_max - m) / metric.range_max


def top1_agreement(pred_a, pred_b) -> float:
    """Fraction of matching labels; the M behind the plain fooling rate."""
    a = np.asarray(pred_a)
    b = np.asarray(pred_b)
    if a.shape != b.shape:
        raise MetricContractError("prediction sets differ in shape")
    return float((a == b).mean())


def fooling_rate(labels_adv, labels_clean) -> float:
    """Fraction of predictions changed by the perturbation,
    i.e. GFR(Top1) = 1 - Top1(pred_adv, pred_clean)."""
    spec = MetricSpec("top1", 1.0)
    return gfr(spec, top1_agreement, labels_adv, labels_clean)


def miou(pred_maps, ref_maps, num_classes: int, strict: bool = False) -> float:
    """Mean over classes of TP / (TP + FP + FN).

    Classes absent from both maps are excluded from the mean unless
    ``strict`` is set, in which case every class counts (absent classes
    contribute 0).
    """
    pred = np.asarray(pred_maps)
    ref = np.asarray(ref_maps)
    if pred.shape != ref.shape:
        raise MetricContractError("map shapes differ")
    if pred.size == 0:
        raise UndefinedMetricError("empty maps")
    if pred.min() < 0 or pred.max() >= num_classes or \
            ref.min() < 0 or ref.max() >= num_classes:
        raise MetricContractError("labels out of [0, num_classes)")
    ious = []
    for k in range(num_classes):
        p = pred == k
        r = ref == k
        union = int((p | r).sum())
        if union == 0:
            if strict:
                ious.append(0.0)
            continue
        ious.append(int((p & r).sum()) / union)
    if not ious:
        raise UndefinedMetricError("no class present in either map")
    return float(np.mean(ious))


DEPTH_METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log",
                      "delta_1", "delta_2", "delta_3")


def depth_metrics(pred, ref) -> dict:
    """Standard depth-estimation error and accuracy metrics over strictly
    positive depth arrays: Abs Rel, Sq Rel, RMSE, RMSE log and the
    delta < 1.25^k accuracies for k = 1, 2, 3."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if p.shape != r.shape or p.size == 0:
        raise MetricContractError("depth arrays must be same nonempty shape")
    if (p <= 0).any() or (r <= 0).any():
        raise MetricContractError("depths must be strictly positive")
    diff = p - r
    ratio = np.maximum(p / r, r / p)
    return {
        "abs_rel": float(np.mean(np.abs(diff) / r)),
        "sq_rel": float(np.mean(diff ** 2 / r)),
        "rmse": float(np.sqrt(np.mean(diff ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(r)) ** 2))),
        "delta_1": float(np.mean(ratio < 1.25)),
        "delta_2": float(np.mean(ratio < 1.25 ** 2)),
        "delta_3": float(np.mean(ratio < 1.25 ** 3)),
    }


def gfr_depth(pred_adv, pred_clean, threshold: float = 1.25) -> float:
    """GFR with M = delta-threshold accuracy between adversarial and
    clean depth predictions (R = 1)."""
    p = np.asarray(pred_adv, dtype=np.float64)
    c = np.asarray(pred_clean, dtype=np.float64)
    if p.shape != c.shape:
        raise MetricContractError("depth arrays differ in shape")
    if (p <= 0).any() or (c <= 0).any():
        raise MetricContractError("depths must be strictly positive")
    acc = float(np.mean(np.maximum(p / c, c / p) < threshold))
    return 1.0 - acc
