import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gliomapipe.errors import DegenerateVolumeError, EmptyForegroundError
from gliomapipe.preprocess import compute_reference_cdf, histogram_match, inverse_cdf, zscore_normalize
from gliomapipe.volume_io import Volume


def _vol(values):
    return Volume(np.asarray(values, dtype=float).reshape(-1, 1, 1))


def _brain(seed, n=4000, scale=1.0, shift=0.0):
    rng = np.random.default_rng(seed)
    data = np.zeros(n)
    fg = rng.random(n) < 0.7
    data[fg] = rng.gamma(4.0, 50.0, fg.sum()) * scale + shift + 1.0
    return _vol(data)


class TestReferenceCdf:
    def test_hand_counted(self):
        cdf = compute_reference_cdf(_vol([0, 1, 1, 2, 2, 0]), n_levels=2)
        np.testing.assert_allclose(cdf.cumulative, [0.5, 1.0])
        assert np.all(np.diff(cdf.levels) > 0)

    def test_constant_foreground(self):
        cdf = compute_reference_cdf(_vol([0, 5, 5, 5]), n_levels=8)
        assert cdf.cumulative[-1] == 1.0
        occupied = np.flatnonzero(np.diff(np.concatenate(([0.0], cdf.cumulative))))
        assert occupied.size == 1
        assert np.all(np.diff(cdf.levels) > 0)

    def test_all_background(self):
        with pytest.raises(EmptyForegroundError):
            compute_reference_cdf(_vol([0, 0, 0]))

    def test_invariants(self):
        cdf = compute_reference_cdf(_brain(1), 64)
        assert cdf.cumulative[0] >= 0
        assert cdf.cumulative[-1] == 1.0
        assert np.all(np.diff(cdf.cumulative) >= 0)


class TestHistogramMatch:
    def test_self_match_within_one_bin(self):
        vol = _brain(2)
        cdf = compute_reference_cdf(vol, 1024)
        out = histogram_match(vol, cdf, 1024)
        fg = vol.data > 0
        assert np.abs(out.data[fg] - vol.data[fg]).max() <= cdf.bin_width

    def test_constant_source_maps_to_reference_median(self):
        ref = _brain(3)
        cdf = compute_reference_cdf(ref, 1024)
        src = _vol([0, 0, 40, 40, 40, 40])
        out = histogram_match(src, cdf, 1024)
        ref_fg = ref.data[ref.data > 0]
        median = inverse_cdf(np.array([0.5]), cdf)[0]
        assert np.abs(out.data[2:] - median).max() <= cdf.bin_width
        assert abs(median - np.median(ref_fg)) <= 2 * cdf.bin_width

    def test_background_stays_zero(self):
        src, ref = _brain(4, scale=2.0, shift=30), _brain(5)
        out = histogram_match(src, compute_reference_cdf(ref), 1024)
        assert np.all(out.data[src.data <= 0] == 0)
        assert out.dims == src.dims and out.spacing == src.spacing

    def test_monotone(self):
        src, ref = _brain(6, scale=3.0), _brain(7)
        out = histogram_match(src, compute_reference_cdf(ref, 256), 256)
        fg = src.data.ravel() > 0
        order = np.argsort(src.data.ravel()[fg], kind="stable")
        mapped = out.data.ravel()[fg][order]
        assert np.all(np.diff(mapped) >= 0)

    def test_matched_distribution_close_to_reference(self):
        src, ref = _brain(8, scale=2.5, shift=100), _brain(9)
        out = histogram_match(src, compute_reference_cdf(ref), 1024)
        a = np.sort(out.data[out.data > 0])
        b = np.sort(ref.data[ref.data > 0])
        q = np.linspace(0.05, 0.95, 19)
        np.testing.assert_allclose(np.quantile(a, q), np.quantile(b, q), rtol=0.05)


class TestZscore:
    def test_hand_values(self):
        out = zscore_normalize(_vol([1, 2, 3, 4]))
        np.testing.assert_allclose(out.data.ravel(), [-1.3416408, -0.4472136, 0.4472136, 1.3416408], rtol=1e-6)

    def test_constant(self):
        with pytest.raises(DegenerateVolumeError):
            zscore_normalize(_vol([3, 3, 3]))

    def test_idempotent(self):
        once = zscore_normalize(_brain(10))
        twice = zscore_normalize(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)

    def test_foreground_only(self):
        vol = _brain(11)
        out = zscore_normalize(vol, foreground_only=True)
        fg = vol.data > 0
        assert np.all(out.data[~fg] == 0)
        assert abs(out.data[fg].mean()) < 1e-5
        assert abs(out.data[fg].std() - 1) < 1e-5

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(2, 300),
                      elements=st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)))
    def test_moments_property(self, values):
        vol = _vol(values)
        data = vol.data.astype(np.float64)
        # relative spread must survive float32 storage
        assume(data.std() > 1e-3 * max(1.0, np.abs(data).max()))
        out = zscore_normalize(vol).data.astype(np.float64)
        assert abs(out.mean()) <= 1e-5
        assert abs(out.std() - 1) <= 1e-5
