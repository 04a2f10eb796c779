import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import window_stats_bruteforce
from sceneiqa.imaging import (ImageDimensionError, LcnParams, extract_patches, local_mean,
                              local_mean_map, local_std, local_std_map, normalize, patch_count,
                              to_grayscale)


class TestGrayscale:
    def test_white(self):
        assert np.all(to_grayscale(np.full((4, 5, 3), 255.0)) == 255.0)

    def test_pure_red(self):
        rgb = np.zeros((3, 3, 3))
        rgb[..., 0] = 255
        np.testing.assert_allclose(to_grayscale(rgb), 0.299 * 255, rtol=0, atol=1e-12)
        assert to_grayscale(rgb)[0, 0] == pytest.approx(76.245, abs=1e-12)

    @given(st.integers(0, 255))
    def test_already_gray(self, v):
        rgb = np.full((2, 2, 3), float(v))
        np.testing.assert_allclose(to_grayscale(rgb), v, atol=1e-12)

    def test_mismatched_channels(self):
        with pytest.raises(ImageDimensionError):
            to_grayscale([np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5))])
        with pytest.raises(ImageDimensionError):
            to_grayscale(np.zeros((4, 4, 2)))


class TestWindowStats:
    def test_constant(self):
        img = np.full((9, 11), 42.0)
        assert local_mean(img, LcnParams(), 4, 5) == 42.0
        assert local_std(img, LcnParams(), 0, 0) == 0.0

    def test_single_pixel_window(self):
        img = np.arange(20.0).reshape(4, 5)
        np.testing.assert_array_equal(local_mean_map(img, LcnParams(0, 0)), img)

    def test_center_of_ramp(self):
        img = np.arange(49.0).reshape(7, 7)
        assert local_mean(img, LcnParams(), 3, 3) == pytest.approx(24.0, abs=1e-12)

    def test_two_value_window(self):
        # windows are (2P+1)(2Q+1), always odd, so {0, 2} cannot appear in equal
        # count; use 1x3 windows: (2, 0, 2) has mean 4/3, (0, 2, 0) has variance 8/9
        img = np.array([[0.0, 2.0, 0.0, 2.0]])
        assert local_mean(img, LcnParams(0, 1), 0, 2) == pytest.approx(4 / 3, abs=1e-12)
        assert local_std(img, LcnParams(0, 1), 0, 1) ** 2 == pytest.approx(8 / 9, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (16, 16), elements=st.floats(0, 255)),
           st.integers(0, 3), st.integers(0, 3))
    def test_matches_bruteforce(self, img, p, q):
        params = LcnParams(p, q)
        mu = local_mean_map(img, params)
        sd = local_std_map(img, params)
        rows = img.tolist()
        for i, j in [(0, 0), (15, 15), (7, 8), (0, 15), (3, 12)]:
            m, s = window_stats_bruteforce(rows, i, j, p, q)
            assert abs(mu[i, j] - m) <= 1e-9
            assert abs(sd[i, j] - s) <= 1e-9

    def test_out_of_bounds(self):
        with pytest.raises(IndexError):
            local_mean(np.zeros((4, 4)), LcnParams(), 4, 0)


class TestNormalize:
    def test_constant_is_zero(self):
        out = normalize(np.full((12, 10), 77.0))
        assert out.shape == (12, 10)
        assert np.all(out == 0.0)

    def test_bright_pixel(self):
        img = np.zeros((9, 9))
        img[4, 4] = 255.0
        _, sigma = window_stats_bruteforce(img.tolist(), 4, 4, 3, 3)
        expected = (255 - 255 / 49) / (sigma + 1)
        assert normalize(img)[4, 4] == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (12, 14), elements=st.integers(0, 200)), st.integers(0, 55))
    def test_offset_invariance_exact(self, img, b):
        a = normalize(img.astype(np.float64))
        c = normalize((img + b).astype(np.float64))
        assert np.array_equal(a, c)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (10, 10), elements=st.floats(0, 200)), st.floats(0, 55))
    def test_offset_invariance_real_values(self, img, b):
        # arbitrary doubles: equality up to rounding of the window sums
        np.testing.assert_allclose(normalize(img + b), normalize(img), rtol=0, atol=1e-9)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            normalize(np.full((4, 4), 300.0))


class TestPatches:
    def test_single(self):
        ps = extract_patches(np.zeros((64, 64)))
        assert [(p.origin_row, p.origin_col) for p in ps] == [(0, 0)]

    def test_two_by_three(self):
        ps = extract_patches(np.zeros((224, 384)), image_id="x")
        assert len(ps) == 6
        assert [(p.origin_row, p.origin_col) for p in ps] == [
            (0, 0), (0, 160), (0, 320), (160, 0), (160, 160), (160, 320)]
        assert all(p.pixels.shape == (64, 64) and p.source_image_id == "x" for p in ps)

    def test_large_count(self):
        # floor((4000 - 64) / 160) + 1 = 25 rows, floor((3000 - 64) / 160) + 1 = 19 columns
        assert patch_count(4000, 3000) == 25 * 19 == 475
        assert len(extract_patches(np.zeros((4000, 3000), dtype=np.float32))) == 475

    def test_too_small(self):
        with pytest.raises(ImageDimensionError, match="smaller than"):
            extract_patches(np.zeros((63, 100)))

    @settings(deadline=None)
    @given(st.integers(64, 700), st.integers(64, 700), st.integers(8, 200))
    def test_count_formula(self, h, w, stride):
        expected = ((h - 64) // stride + 1) * ((w - 64) // stride + 1)
        assert patch_count(h, w, 64, stride) == expected
        ps = extract_patches(np.zeros((h, w)), 64, stride)
        assert len(ps) == expected
        assert all(p.origin_row % stride == 0 and p.origin_col % stride == 0 for p in ps)

    @settings(deadline=None)
    @given(st.integers(64, 400), st.integers(64, 400), st.integers(64, 160))
    def test_non_overlapping(self, h, w, stride):
        ps = extract_patches(np.zeros((h, w)), 64, stride)
        cover = np.zeros((h, w), dtype=int)
        for p in ps:
            cover[p.origin_row:p.origin_row + 64, p.origin_col:p.origin_col + 64] += 1
        assert cover.max() <= 1

    def test_content(self):
        img = np.arange(200 * 250, dtype=np.float64).reshape(200, 250) % 255
        ps = extract_patches(img, 64, 160)
        for p in ps:
            np.testing.assert_array_equal(
                p.pixels, img[p.origin_row:p.origin_row + 64, p.origin_col:p.origin_col + 64].astype(np.float32))
