import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gduap.metrics import (DEPTH_METRIC_NAMES, MetricContractError,
                           MetricReport, MetricSpec, UndefinedMetricError,
                           depth_metrics, dump_report, fooling_rate, gfr,
                           gfr_depth, miou, top1_agreement)


def miou_oracle(pred, ref, num_classes):
    """Explicit confusion-matrix mIoU with absent classes excluded."""
    ious = []
    for k in range(num_classes):
        tp = fp = fn = 0
        for p, r in zip(np.ravel(pred), np.ravel(ref)):
            if p == k and r == k:
                tp += 1
            elif p == k:
                fp += 1
            elif r == k:
                fn += 1
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def depth_oracle(pred, ref):
    """Scalar-loop depth metrics."""
    n = len(pred)
    abs_rel = sq_rel = se = se_log = 0.0
    d1 = d2 = d3 = 0
    for p, r in zip(pred, ref):
        abs_rel += abs(p - r) / r
        sq_rel += (p - r) ** 2 / r
        se += (p - r) ** 2
        se_log += (np.log(p) - np.log(r)) ** 2
        ratio = max(p / r, r / p)
        d1 += ratio < 1.25
        d2 += ratio < 1.25 ** 2
        d3 += ratio < 1.25 ** 3
    return {"abs_rel": abs_rel / n, "sq_rel": sq_rel / n,
            "rmse": np.sqrt(se / n), "rmse_log": np.sqrt(se_log / n),
            "delta_1": d1 / n, "delta_2": d2 / n, "delta_3": d3 / n}


class TestGFR:
    def test_identical_predictions_zero(self):
        y = np.arange(50) % 7
        spec = MetricSpec("top1", 1.0)
        assert gfr(spec, top1_agreement, y, y) == 0.0

    def test_direct_substitution(self):
        spec = MetricSpec("m", 1.0)
        assert gfr(spec, lambda a, b: 0.6, [1, 2], [1, 2]) \
            == pytest.approx(0.4)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        adv = rng.integers(0, 5, 1000)
        clean = rng.integers(0, 5, 1000)
        unchanged = sum(1 for a, c in zip(adv, clean) if a == c)
        expected = 1 - unchanged / 1000
        assert fooling_rate(adv, clean) == pytest.approx(expected, abs=1e-12)

    def test_lower_better_refused(self):
        spec = MetricSpec("rmse_like", 5.0, direction="lower_better")
        with pytest.raises(MetricContractError):
            gfr(spec, lambda a, b: 1.0, [1], [1])

    def test_length_mismatch_rejected(self):
        spec = MetricSpec("top1", 1.0)
        with pytest.raises(MetricContractError):
            gfr(spec, top1_agreement, [1, 2, 3], [1, 2])

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)),
                    min_size=1, max_size=200))
    @settings(max_examples=50, deadline=None)
    def test_bounds_and_complement(self, pairs):
        adv = np.array([a for a, _ in pairs])
        clean = np.array([c for _, c in pairs])
        fr = fooling_rate(adv, clean)
        assert 0.0 <= fr <= 1.0
        assert fr + np.mean(adv == clean) == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)),
                    min_size=2, max_size=100),
           st.randoms(use_true_random=False))
    @settings(max_examples=30, deadline=None)
    def test_joint_permutation_invariance(self, pairs, rnd):
        adv = np.array([a for a, _ in pairs])
        clean = np.array([c for _, c in pairs])
        perm = list(range(len(pairs)))
        rnd.shuffle(perm)
        assert fooling_rate(adv, clean) == \
            pytest.approx(fooling_rate(adv[perm], clean[perm]), abs=1e-12)


class TestFoolingRate:
    def test_all_flipped(self):
        assert fooling_rate([1, 2, 3], [2, 3, 4]) == 1.0

    def test_half_flipped(self):
        assert fooling_rate([1, 2, 3, 4], [1, 2, 9, 9]) == 0.5


class TestMiou:
    def test_identical_maps(self):
        maps = np.arange(16).reshape(4, 4) % 3
        assert miou(maps, maps, 3) == 1.0

    def test_disjoint_single_class(self):
        pred = np.zeros((4, 4), dtype=int)
        ref = np.ones((4, 4), dtype=int)
        assert miou(pred, ref, 2) == 0.0

    def test_hand_enumerated_confusion(self):
        pred = np.array([[0, 0, 1, 1],
                         [0, 1, 1, 1],
                         [0, 0, 0, 0],
                         [1, 1, 0, 0]])
        ref = np.array([[0, 1, 1, 1],
                        [0, 0, 1, 1],
                        [0, 0, 1, 0],
                        [1, 1, 1, 0]])
        # class 0: inter 6 of union 10; class 1: inter 6 of union 10
        expected = (6 / 10 + 6 / 10) / 2
        assert miou(pred, ref, 2) == pytest.approx(expected, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            num_classes = int(rng.integers(2, 6))
            pred = rng.integers(0, num_classes, (6, 6))
            ref = rng.integers(0, num_classes, (6, 6))
            assert miou(pred, ref, num_classes) == pytest.approx(
                miou_oracle(pred, ref, num_classes), abs=1e-12)

    def test_absent_class_excluded_vs_strict(self):
        pred = np.zeros((3, 3), dtype=int)
        ref = np.zeros((3, 3), dtype=int)
        assert miou(pred, ref, 5) == 1.0
        assert miou(pred, ref, 5, strict=True) == pytest.approx(1 / 5)

    def test_relabel_symmetry(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 4, (5, 5))
        ref = rng.integers(0, 4, (5, 5))
        relabel = np.array([2, 3, 0, 1])
        assert miou(pred, ref, 4) == pytest.approx(
            miou(relabel[pred], relabel[ref], 4), abs=1e-12)

    def test_no_valid_class(self):
        with pytest.raises(MetricContractError):
            miou(np.array([[5]]), np.array([[5]]), 2)
        with pytest.raises(UndefinedMetricError):
            miou(np.empty((0, 0), dtype=int), np.empty((0, 0), dtype=int), 3)


class TestDepthMetrics:
    def test_identity(self):
        ref = np.random.default_rng(0).uniform(1, 50, 20)
        result = depth_metrics(ref, ref)
        for key in ("abs_rel", "sq_rel", "rmse", "rmse_log"):
            assert result[key] == 0.0
        for key in ("delta_1", "delta_2", "delta_3"):
            assert result[key] == 1.0

    def test_constant_double_ratio(self):
        ref = np.random.default_rng(1).uniform(1, 10, 15)
        result = depth_metrics(2 * ref, ref)
        # ratio 2 exceeds every 1.25^k threshold (1.25^3 = 1.953125)
        assert result["delta_1"] == 0.0
        assert result["delta_2"] == 0.0
        assert result["delta_3"] == 0.0
        assert result["abs_rel"] == pytest.approx(1.0)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            ref = rng.uniform(0.5, 60, 10)
            pred = ref * rng.uniform(0.4, 2.5, 10)
            got = depth_metrics(pred, ref)
            want = depth_oracle(pred, ref)
            for key in DEPTH_METRIC_NAMES:
                assert got[key] == pytest.approx(want[key], abs=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(MetricContractError):
            depth_metrics([1.0, 0.0], [1.0, 1.0])
        with pytest.raises(MetricContractError):
            depth_metrics([1.0], [-2.0])


class TestGfrDepth:
    def test_identical_zero(self):
        d = np.random.default_rng(0).uniform(1, 30, 25)
        assert gfr_depth(d, d) == 0.0

    def test_uniform_ratio_above_threshold(self):
        d = np.random.default_rng(1).uniform(1, 30, 25)
        assert gfr_depth(1.3 * d, d, threshold=1.25) == 1.0

    def test_in_unit_interval(self):
        rng = np.random.default_rng(2)
        clean = rng.uniform(1, 30, 100)
        adv = clean * rng.uniform(0.5, 2.0, 100)
        assert 0.0 <= gfr_depth(adv, clean) <= 1.0


class TestReportSerialization:
    def test_six_significant_digits_and_sorted_keys(self):
        report = MetricReport(clean={"top1": 0.123456789},
                              adversarial={"top1": 0.98765432123},
                              gfr={"top1": 1 / 3}, n_samples=10)
        text = report.to_json()
        data = json.loads(text)
        assert data["gfr"]["top1"] == 0.333333
        assert data["adversarial"]["top1"] == 0.987654
        assert list(data) == sorted(data)
        # stable: same content serializes identically
        assert text == report.to_json()

    def test_dump_report_nested(self):
        text = dump_report({"b": [1.23456789, {"z": 2.0, "a": 3.0}],
                            "a": 0.1})
        assert json.loads(text)["b"][0] == 1.23457
