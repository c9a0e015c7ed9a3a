import numpy as np
import pytest

from gduap.crafting import random_baseline
from gduap.datasets import make_desk10
from gduap.defenses import (DefenseConfigError, TransformSpec, apply,
                            bit_reduce_levels, defended_predictions,
                            evaluate_defended, grid_from_csv, grid_to_csv)


@pytest.fixture(scope="module")
def natural_batch():
    return make_desk10(12, 4).images


class TestTransformSpec:
    def test_unknown_kind(self):
        with pytest.raises(DefenseConfigError):
            TransformSpec("sharpen")

    def test_param_ranges(self):
        with pytest.raises(DefenseConfigError):
            TransformSpec("bit_reduce", {"bits": 8})
        with pytest.raises(DefenseConfigError):
            TransformSpec("bit_reduce", {"bits": 0})
        with pytest.raises(DefenseConfigError):
            TransformSpec("jpeg", {"quality": 0})
        with pytest.raises(DefenseConfigError):
            TransformSpec("median_smooth", {"k": 0})


class TestApply:
    def test_output_range_and_shape(self, natural_batch):
        for kind, params in [("gaussian_smooth", {"sigma": 1.5}),
                             ("median_smooth", {"k": 3}),
                             ("bilateral", {}),
                             ("bit_reduce", {"bits": 3}),
                             ("jpeg", {"quality": 75})]:
            out = apply(TransformSpec(kind, params), natural_batch)
            assert out.shape == natural_batch.shape
            assert out.min() >= 0.0 and out.max() <= 255.0

    def test_gaussian_sigma_zero_is_identity(self, natural_batch):
        out = apply(TransformSpec("gaussian_smooth", {"sigma": 0.0}),
                    natural_batch)
        assert np.abs(out - natural_batch).max() <= 1.0

    def test_bit_reduce_level_mapping(self):
        # floor quantization to 8 levels, rescaled onto [0, 255]
        step, scale = bit_reduce_levels(3)
        assert step == 32.0
        x = np.array([[[[0.0], [31.9], [32.0], [255.0]]]])
        out = apply(TransformSpec("bit_reduce", {"bits": 3}), x)
        np.testing.assert_allclose(
            out.ravel(), [0.0, 0.0, scale, 7 * scale], atol=1e-4)
        assert out.ravel()[-1] == pytest.approx(255.0)

    def test_bit_reduce_idempotent(self, natural_batch):
        spec = TransformSpec("bit_reduce", {"bits": 3})
        once = apply(spec, natural_batch)
        twice = apply(spec, once)
        np.testing.assert_array_equal(once, twice)

    def test_jpeg_quality_100_near_identity(self, natural_batch):
        out = apply(TransformSpec("jpeg", {"quality": 100}), natural_batch)
        assert abs(float(out.mean() - natural_batch.mean())) < 2.0

    def test_median_removes_salt_noise(self):
        img = np.full((1, 16, 16, 3), 100.0, dtype=np.float32)
        img[0, 8, 8, :] = 255.0
        out = apply(TransformSpec("median_smooth", {"k": 3}), img)
        assert out[0, 8, 8, 0] == 100.0


class TestTenCrop:
    def test_apply_passthrough(self, natural_batch):
        out = apply(TransformSpec("ten_crop"), natural_batch)
        np.testing.assert_array_equal(out, natural_batch)

    def test_predictions_deterministic(self, victim_a, desk_test):
        t = TransformSpec("ten_crop")
        p1 = defended_predictions(victim_a, t, desk_test.images[:16])
        p2 = defended_predictions(victim_a, t, desk_test.images[:16])
        np.testing.assert_array_equal(p1, p2)


class TestEvaluateDefended:
    def test_near_identity_matches_undefended(self, victim_a, desk_test,
                                              baseline_perturbation):
        named = {"baseline": baseline_perturbation}
        ident = evaluate_defended(victim_a, TransformSpec("identity"), named,
                                  desk_test.images, desk_test.labels)
        near = evaluate_defended(victim_a,
                                 TransformSpec("gaussian_smooth",
                                               {"sigma": 1e-4}),
                                 named, desk_test.images, desk_test.labels)
        assert abs(ident["clean_top1"] - near["clean_top1"]) <= 0.01
        assert abs(ident["fooling"]["baseline"]
                   - near["fooling"]["baseline"]) <= 0.01

    def test_fooling_measured_against_defended_clean(self, victim_a,
                                                     desk_test,
                                                     baseline_perturbation):
        t = TransformSpec("bit_reduce", {"bits": 2})
        named = {"baseline": baseline_perturbation}
        row = evaluate_defended(victim_a, t, named, desk_test.images[:64],
                                desk_test.labels[:64])
        defended_clean = defended_predictions(victim_a, t,
                                              desk_test.images[:64])
        adv = np.clip(desk_test.images[:64]
                      + baseline_perturbation.delta[None], 0, 255)
        defended_adv = defended_predictions(victim_a, t, adv)
        expected = float((defended_adv != defended_clean).mean())
        assert row["fooling"]["baseline"] == pytest.approx(expected)

    def test_empty_test_set_rejected(self, victim_a, baseline_perturbation):
        with pytest.raises(DefenseConfigError):
            evaluate_defended(victim_a, TransformSpec("identity"),
                              {"b": baseline_perturbation},
                              np.empty((0, 32, 32, 3)))


class TestGridCsv:
    def test_round_trip(self):
        rows = [
            {"transform": "median_smooth", "params": {"k": 3},
             "clean_top1": 0.8125, "fooling": {"range": 0.25, "none": 0.5}},
            {"transform": "jpeg", "params": {"quality": 50},
             "clean_top1": 0.75, "fooling": {"range": 0.125, "none": 0.375}},
        ]
        text = grid_to_csv(rows)
        back = grid_from_csv(text)
        assert back == rows

    def test_bad_header_rejected(self):
        with pytest.raises(DefenseConfigError):
            grid_from_csv("a,b,c\n1,2,3\n")
