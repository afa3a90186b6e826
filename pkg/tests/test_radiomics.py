import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliomapipe.errors import EmptyLesionError, EmptyMaskError
from gliomapipe.postprocess import binarize_masks
from gliomapipe.radiomics import (
    FEATURE_NAMES,
    FIRST_ORDER_NAMES,
    SHAPE_NAMES,
    extract_feature_row,
    first_order_features,
    max_pairwise_distance,
    shape_features,
)
from gliomapipe.volume_io import CHANNEL_ORDER, SegmentationVolume, Study, Volume
from helpers import naive_first_order, naive_max_diameter, naive_surface_area

SPHERE_CONST = (math.pi / 6) ** (1 / 3)


def _line(values):
    return Volume(np.asarray(values, float).reshape(-1, 1, 1)), np.ones((len(values), 1, 1), bool)


def _ball(r, pad=2):
    n = 2 * r + 1 + 2 * pad
    g = np.indices((n, n, n)) - (n - 1) / 2
    return (g ** 2).sum(axis=0) <= r * r


class TestFirstOrder:
    def test_constant(self):
        f = first_order_features(*_line([2, 2, 2, 2]))
        assert (f.mean, f.std, f.entropy, f.uniformity) == (2, 0, 0, 1)
        assert f.degenerate

    def test_one_value_per_bin(self):
        f = first_order_features(*_line([1, 2, 3, 4]), bin_width=1.0)
        assert f.entropy == pytest.approx(2.0, abs=1e-12)
        assert f.uniformity == pytest.approx(0.25, abs=1e-12)

    def test_hand_values(self):
        f = first_order_features(*_line([1, 2, 3, 4]))
        assert f.iqr == 1.5 and f.range == 3 and f.mad == 1.0
        assert f.rms == pytest.approx(math.sqrt(7.5), abs=1e-12)
        assert f.volume_mm3 == 4 and f.total_energy == 30

    def test_two_voxels_have_no_robust_set(self):
        f = first_order_features(*_line([1.0, 5.0]))
        assert f.robust_mad == 0.0 and f.degenerate

    def test_single_voxel(self):
        f = first_order_features(*_line([7.0]))
        assert f.skewness == 0 and f.kurtosis == 0 and f.degenerate

    def test_empty_mask(self):
        vol, mask = _line([1, 2])
        with pytest.raises(EmptyMaskError):
            first_order_features(vol, ~mask)

    @pytest.mark.parametrize("seed", range(25))
    def test_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shape = (5, 5, 4)
        image = Volume(rng.normal(400, 120, shape), (0.9, 1.1, 2.0))
        mask = rng.random(shape) < rng.uniform(0.05, 0.9)
        mask[tuple(rng.integers(0, 4, 3))] = True
        f = first_order_features(image, mask)
        ref = naive_first_order(image.data[mask], image.voxel_volume)
        for name in FIRST_ORDER_NAMES:
            assert getattr(f, name) == pytest.approx(ref[name], rel=1e-9, abs=1e-9), name

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-500, 500))
    def test_intensity_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        values = rng.normal(300, 80, 60)
        a = first_order_features(*_line(values))
        b = first_order_features(*_line(values + c))
        assert b.mean == pytest.approx(a.mean + c, abs=1e-3)
        for name in ("std", "variance", "skewness", "kurtosis", "mad", "iqr", "range"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-3, abs=1e-3), name

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        f = first_order_features(*_line(rng.gamma(2.0, 100.0, rng.integers(1, 80))))
        assert f.minimum <= f.p10 <= f.median <= f.p90 <= f.maximum
        assert f.variance == pytest.approx(f.std ** 2, rel=1e-6, abs=1e-12)
        assert 0 < f.uniformity <= 1


class TestShape:
    def test_single_voxel(self):
        s = shape_features(np.ones((1, 1, 1)))
        assert (s.volume_mm3, s.surface_area_mm2) == (1, 6)
        assert s.sphericity == pytest.approx(SPHERE_CONST, abs=1e-12)

    @pytest.mark.parametrize("side", [1, 3, 7])
    def test_cube_sphericity(self, side):
        mask = np.zeros((side + 2,) * 3, bool)
        mask[1:-1, 1:-1, 1:-1] = True
        s = shape_features(mask)
        assert abs(s.sphericity - SPHERE_CONST) <= 1e-12
        assert s.compactness2 == pytest.approx(s.sphericity ** 3, rel=1e-6)
        assert s.spherical_disproportion == pytest.approx(1 / s.sphericity, rel=1e-6)

    def test_rod(self):
        mask = np.ones((1, 1, 10), bool)
        s = shape_features(mask)
        assert s.max_3d_diameter == 9.0
        assert s.elongation == s.flatness == 0.0
        assert s.degenerate
        assert s.max_2d_axial == 0.0 and s.max_2d_sagittal == 9.0

    def test_ball_sphericity_stable(self):
        values = [shape_features(_ball(r)).sphericity for r in (8, 12)]
        ref = sum(values) / 2
        assert all(abs(v - ref) <= 0.1 * ref for v in values)
        assert all(v < 1 for v in values)

    def test_axes_of_box(self):
        mask = np.zeros((12, 8, 6), bool)
        mask[1:11, 1:5, 1:3] = True  # 10 x 4 x 2
        s = shape_features(mask)
        # variance of n equally spaced unit steps is (n^2 - 1) / 12
        assert s.major_axis == pytest.approx(4 * math.sqrt(99 / 12))
        assert s.minor_axis == pytest.approx(4 * math.sqrt(15 / 12))
        assert s.least_axis == pytest.approx(4 * math.sqrt(3 / 12))
        assert 0 < s.flatness <= s.elongation <= 1

    @pytest.mark.parametrize("seed", range(15))
    def test_naive_oracles(self, seed):
        rng = np.random.default_rng(seed)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        mask = rng.random((6, 5, 4)) < 0.4
        mask[2, 2, 2] = True
        s = shape_features(mask, spacing)
        assert s.surface_area_mm2 == pytest.approx(naive_surface_area(mask, spacing), rel=1e-12)
        assert s.max_3d_diameter == pytest.approx(naive_max_diameter(mask, spacing), rel=1e-12)

    def test_hull_reduction_matches_brute_force(self):
        pts = np.argwhere(_ball(7)).astype(float)
        from gliomapipe.radiomics import _brute_max_distance
        assert max_pairwise_distance(pts) == _brute_max_distance(pts)

    @pytest.mark.parametrize("shift", [(0, 0, 0), (3, 1, 2), (5, 4, 0)])
    def test_translation_invariance(self, shift):
        rng = np.random.default_rng(4)
        core = rng.random((5, 5, 5)) < 0.6
        core[2, 2, 2] = True
        img_core = rng.normal(500, 50, (5, 5, 5))
        mask = np.zeros((12, 12, 12), bool)
        img = np.zeros((12, 12, 12))
        sl = tuple(slice(o, o + 5) for o in shift)
        mask[sl] = core
        img[sl] = img_core
        vol = Volume(img, (1.0, 1.2, 2.5))
        values = np.array([getattr(first_order_features(vol, mask), n) for n in FIRST_ORDER_NAMES]
                          + [getattr(shape_features(mask, vol.spacing), n) for n in SHAPE_NAMES])
        mask0 = np.zeros_like(mask)
        img0 = np.zeros_like(img)
        mask0[:5, :5, :5] = core
        img0[:5, :5, :5] = img_core
        vol0 = Volume(img0, vol.spacing)
        ref = np.array([getattr(first_order_features(vol0, mask0), n) for n in FIRST_ORDER_NAMES]
                       + [getattr(shape_features(mask0, vol.spacing), n) for n in SHAPE_NAMES])
        np.testing.assert_allclose(values, ref, rtol=1e-12, atol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyMaskError):
            shape_features(np.zeros((2, 2, 2)))


def _study(labels, age=55.0):
    rng = np.random.default_rng(0)
    vols = {m: Volume(rng.normal(500, 40, labels.shape), (1, 1, 1), m) for m in CHANNEL_ORDER}
    return Study("R1", vols, SegmentationVolume(labels), age, 400.0)


class TestFeatureRow:
    def test_names(self):
        assert len(FEATURE_NAMES) == 4 * (19 + 16) + 1 == 141
        assert FEATURE_NAMES[0] == "whole.volume_mm3" and FEATURE_NAMES[-1] == "age"
        assert len(set(FEATURE_NAMES)) == 141

    def test_row_and_missing_block(self):
        labels = np.zeros((8, 8, 8), np.uint8)
        labels[2:6, 2:6, 2:6] = 2
        labels[3:5, 3:5, 3:5] = 4
        study = _study(labels)
        row = extract_feature_row(study, binarize_masks(study.ground_truth))
        assert row.values.shape == (141,)
        assert row.missing_masks == ("necrosis",)
        nec = [i for i, n in enumerate(FEATURE_NAMES) if n.startswith("necrosis.")]
        assert not row.values[nec].any()
        assert row.values[-1] == 55.0
        again = extract_feature_row(study, binarize_masks(study.ground_truth))
        np.testing.assert_array_equal(row.values, again.values)

    def test_empty_lesion(self):
        study = _study(np.zeros((4, 4, 4), np.uint8))
        with pytest.raises(EmptyLesionError):
            extract_feature_row(study, binarize_masks(study.ground_truth))
