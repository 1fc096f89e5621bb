import warnings

import numpy as np
import pytest

from crowdsplat.image import ImageBuffer
from crowdsplat.occlusion import (
    MaskSpec,
    OcclusionConfig,
    apply_mask,
    bezier_mask,
    ellipse_mask,
    line_cut_mask,
    mask_from_spec,
    morph_close,
    morph_dilate,
    synthesize_mask,
    union_from_spec,
)


class TestEllipse:
    def test_axis_aligned_membership(self):
        mask = ellipse_mask((50, 50), 10, 20, 0.0, 100, 100)
        assert mask.data[50, 55, 0] == 1.0  # 25/100 <= 1
        assert mask.data[50, 61, 0] == 0.0  # 121/100 > 1

    def test_rotated_ninety_degrees(self):
        mask = ellipse_mask((50, 50), 10, 20, np.pi / 2, 100, 100)
        assert mask.data[50, 55, 0] == 1.0  # tested against a_y: 25/400
        assert mask.data[50, 71, 0] == 0.0  # 441/400 > 1

    def test_circle_ignores_angle(self):
        # fractional radius keeps pixels off the exact boundary, where
        # rotation round-off could flip the <= test
        rng = np.random.default_rng(0)
        reference = ellipse_mask((40, 40), 12.25, 12.25, 0.0, 80, 80)
        for angle in rng.uniform(0, 2 * np.pi, 5):
            rotated = ellipse_mask((40, 40), 12.25, 12.25, angle, 80, 80)
            np.testing.assert_array_equal(rotated.data, reference.data)

    def test_rejects_nonpositive_axes(self):
        with pytest.raises(ValueError):
            ellipse_mask((0, 0), 0, 5, 0.0, 10, 10)


class TestBezier:
    def test_straight_band(self):
        mask = bezier_mask((0, 50), (50, 50), (100, 50), 10, 110, 100)
        filled_rows = np.flatnonzero(mask.data[:, 50, 0])
        assert filled_rows.min() == 45 and filled_rows.max() == 55
        for row in (45, 50, 55):
            cols = np.flatnonzero(mask.data[row, :, 0])
            assert cols.min() == 0 and cols.max() == 100
        assert mask.data[44, :, 0].sum() == 0
        assert mask.data[56, :, 0].sum() == 0

    def test_midpoint_is_masked(self):
        c0, c1, c2 = (10.0, 20.0), (80.0, 90.0), (40.0, 15.0)
        mid = 0.25 * np.array(c0) + 0.5 * np.array(c1) + 0.25 * np.array(c2)
        mask = bezier_mask(c0, c1, c2, 10, 128, 128)
        px = np.round(mid).astype(int)
        assert mask.data[px[1], px[0], 0] == 1.0

    def test_degenerate_curve_warns_and_returns_empty(self):
        with pytest.warns(UserWarning, match="degenerate"):
            mask = bezier_mask((30, 30), (30, 30), (30, 30), 10, 64, 64)
        assert mask.data.sum() == 0.0

    def test_rejects_nonpositive_thickness(self):
        with pytest.raises(ValueError):
            bezier_mask((0, 0), (1, 1), (2, 2), 0, 10, 10)


class TestLineCut:
    def test_half_plane_formula(self):
        # horizontal line through the image center: L(x, y) = 10 * (y - 50)
        mask = line_cut_mask((0, 50), (10, 50), 1, 100, 100)
        assert mask.data[51:, :, 0].all()
        assert mask.data[:50, :, 0].sum() == 0

    def test_pixels_exactly_on_line_unmasked_on_both_sides(self):
        pos = line_cut_mask((0, 50), (10, 50), 1, 100, 100)
        neg = line_cut_mask((0, 50), (10, 50), -1, 100, 100)
        assert pos.data[50, :, 0].sum() == 0
        assert neg.data[50, :, 0].sum() == 0
        # the two sides plus the line partition the image
        np.testing.assert_array_equal(pos.data + neg.data <= 1.0, True)

    def test_oversized_side_switches_to_complement(self):
        # preferred side covers ~85% -> the ~15% complement comes back
        mask = line_cut_mask((0, 85), (10, 85), -1, 100, 100, max_area=0.70)
        frac = mask.data.mean()
        assert 0.10 < frac < 0.20
        assert mask.data[86:, :, 0].all()

    def test_returned_fraction_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p1 = tuple(rng.uniform(0, 100, 2))
            p2 = tuple(rng.uniform(0, 100, 2))
            if p1 == p2:
                continue
            side = 1 if rng.random() < 0.5 else -1
            mask = line_cut_mask(p1, p2, side, 100, 100, max_area=0.70)
            assert mask.data.mean() <= 0.70

    def test_identical_endpoints_rejected(self):
        with pytest.raises(ValueError):
            line_cut_mask((5, 5), (5, 5), 1, 10, 10)


class TestMorphology:
    def test_unit_kernel_is_identity(self):
        rng = np.random.default_rng(1)
        mask = ImageBuffer((rng.random((20, 20)) > 0.5).astype(np.float64), "mask")
        np.testing.assert_array_equal(morph_dilate(mask, 1, 3).data, mask.data)
        np.testing.assert_array_equal(morph_close(mask, 1).data, mask.data)

    def test_single_pixel_dilates_to_block(self):
        arr = np.zeros((21, 21))
        arr[10, 10] = 1.0
        out = morph_dilate(ImageBuffer(arr, "mask"), 5, 1)
        expected = np.zeros((21, 21))
        expected[8:13, 8:13] = 1.0
        np.testing.assert_array_equal(out.data[:, :, 0], expected)

    def test_closing_bridges_small_gap(self):
        arr = np.zeros((15, 15))
        arr[7, 5] = 1.0
        arr[7, 8] = 1.0
        out = morph_close(ImageBuffer(arr, "mask"), 5)
        assert out.data[7, 6, 0] == 1.0 and out.data[7, 7, 0] == 1.0

    def test_dilation_is_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            arr = (rng.random((24, 24)) > 0.8).astype(np.float64)
            mask = ImageBuffer(arr, "mask")
            dilated = morph_dilate(mask, 5, 1)
            assert np.all(dilated.data >= mask.data)
            assert dilated.data.sum() >= mask.data.sum()

    def test_even_kernel_rejected(self):
        mask = ImageBuffer(np.zeros((8, 8)), "mask")
        with pytest.raises(ValueError):
            morph_dilate(mask, 4)
        with pytest.raises(ValueError):
            morph_close(mask, 2)


class TestSynthesize:
    def test_seeded_determinism(self):
        cfg = OcclusionConfig()
        kp = [(200.0, 180.0), (300.0, 350.0)]
        spec_a, mask_a = synthesize_mask(kp, 512, 512, cfg, 1234)
        spec_b, mask_b = synthesize_mask(kp, 512, 512, cfg, 1234)
        assert spec_a == spec_b
        np.testing.assert_array_equal(mask_a.data, mask_b.data)

    def test_all_off_config_yields_empty_mask(self):
        cfg = OcclusionConfig(k_max=0, n_b_range=(0, 0), line_prob=0.0)
        for seed in range(5):
            spec, mask = synthesize_mask([(100.0, 100.0)], 256, 256, cfg, seed)
            assert mask.data.sum() == 0.0
            assert spec.ellipses == () and spec.beziers == () and spec.line_cut is None

    def test_empty_keypoints_yield_no_ellipses(self):
        cfg = OcclusionConfig()
        for seed in range(10):
            spec, _ = synthesize_mask([], 128, 128, cfg, seed)
            assert spec.ellipses == ()

    def test_replay_reproduces_mask_and_union(self):
        cfg = OcclusionConfig()
        for seed in (5, 6, 7):
            spec, mask = synthesize_mask([(60.0, 60.0)], 200, 200, cfg, seed)
            np.testing.assert_array_equal(mask_from_spec(spec, cfg).data, mask.data)
            rebuilt = MaskSpec.from_dict(spec.to_dict())
            np.testing.assert_array_equal(mask_from_spec(rebuilt, cfg).data, mask.data)

    def test_union_contains_each_component(self):
        cfg = OcclusionConfig()
        spec, _ = synthesize_mask([(100.0, 120.0)], 256, 256, cfg, 99)
        union = union_from_spec(spec).data[:, :, 0]
        for e in spec.ellipses:
            part = ellipse_mask(e.center, e.a_x, e.a_y, e.angle, 256, 256).data[:, :, 0]
            assert np.all(union >= part)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for b in spec.beziers:
                part = bezier_mask(b.c0, b.c1, b.c2, b.thickness, 256, 256).data[:, :, 0]
                assert np.all(union >= part)

    def test_sampled_values_respect_config_ranges(self):
        cfg = OcclusionConfig()
        for seed in range(40):
            spec, _ = synthesize_mask([(128.0, 128.0)], 256, 256, cfg, seed)
            assert len(spec.ellipses) <= cfg.k_max
            assert len(spec.beziers) <= cfg.n_b_range[1]
            for e in spec.ellipses:
                assert cfg.axis_range[0] <= e.a_x <= cfg.axis_range[1]
                assert cfg.axis_range[0] <= e.a_y <= cfg.axis_range[1]
                assert 0.0 <= e.angle <= 2 * np.pi
            for b in spec.beziers:
                assert cfg.thickness_range[0] <= b.thickness <= cfg.thickness_range[1]


class TestApplyMask:
    def test_zero_mask_is_bit_exact_identity(self):
        rng = np.random.default_rng(3)
        image = ImageBuffer(rng.random((32, 32, 3)))
        mask = ImageBuffer(np.zeros((32, 32)), "mask")
        out = apply_mask(image, mask, (1, 1, 1))
        np.testing.assert_array_equal(out.data, image.data)

    def test_full_mask_is_fill_color(self):
        image = ImageBuffer(np.random.default_rng(0).random((16, 16, 3)))
        mask = ImageBuffer(np.ones((16, 16)), "mask")
        out = apply_mask(image, mask, (0.25, 0.5, 0.75))
        np.testing.assert_array_equal(
            out.data, np.broadcast_to([0.25, 0.5, 0.75], (16, 16, 3))
        )

    def test_half_mask_keeps_other_half_bit_exact(self):
        rng = np.random.default_rng(5)
        image = ImageBuffer(rng.random((20, 20, 3)))
        arr = np.zeros((20, 20))
        arr[:, 10:] = 1.0
        out = apply_mask(image, ImageBuffer(arr, "mask"), (1, 1, 1))
        np.testing.assert_array_equal(out.data[:, :10], image.data[:, :10])
        np.testing.assert_array_equal(out.data[:, 10:], 1.0)

    def test_dimension_mismatch_rejected(self):
        image = ImageBuffer(np.zeros((8, 8, 3)))
        mask = ImageBuffer(np.zeros((9, 9)), "mask")
        with pytest.raises(ValueError, match="sizes differ"):
            apply_mask(image, mask)
