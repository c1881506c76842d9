import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facerec.imaging import (
    BoundsError,
    GrayImage,
    ImageError,
    Rect,
    box_sum,
    box_sums,
    decode_pgm,
    encode_pgm,
    gaussian_kernel_1d,
    integral_image,
    read_image,
    resize,
    sniff_image,
    to_grayscale,
    write_pgm,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def brute_integral(a):
    """O(n^4) summed-area table."""
    h, w = a.shape
    out = np.zeros_like(a)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for yy in range(y + 1):
                for xx in range(x + 1):
                    s += a[yy, xx]
            out[y, x] = s
    return out


class TestGrayImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(ImageError):
            GrayImage(np.full((2, 2), 1.5))

    def test_rejects_empty(self):
        with pytest.raises(ImageError):
            GrayImage(np.zeros((0, 3)))

    def test_data_is_read_only(self):
        img = GrayImage(np.zeros((2, 3)))
        assert img.width == 3 and img.height == 2
        with pytest.raises(ValueError):
            img.data[0, 0] = 1.0

    def test_crop_outside_raises(self):
        with pytest.raises(BoundsError):
            GrayImage(np.zeros((4, 4))).crop(Rect(2, 2, 3, 3))


class TestGrayscale:
    @pytest.mark.parametrize("v", [0.0, 0.25, 0.5, 1.0])
    def test_equal_channels_identity(self, v):
        assert to_grayscale(np.full((1, 1, 3), v)).data[0, 0] == pytest.approx(v, abs=1e-12)

    def test_endpoints(self):
        assert to_grayscale(np.zeros((2, 2, 3))).data.max() == 0.0
        assert to_grayscale(np.ones((2, 2, 3))).data.min() == pytest.approx(1.0)

    def test_matches_per_pixel_luma(self, rng):
        rgb = rng.random((8, 8, 3))
        out = to_grayscale(rgb).data
        for y in range(8):
            for x in range(8):
                r, g, b = rgb[y, x]
                assert abs(out[y, x] - (0.299 * r + 0.587 * g + 0.114 * b)) <= 1e-9

    def test_zero_dimension(self):
        with pytest.raises(ImageError):
            to_grayscale(np.zeros((0, 4, 3)))

    @given(arrays(np.float64, (3, 4, 3), elements=unit))
    def test_output_in_unit_range(self, rgb):
        d = to_grayscale(rgb).data
        assert d.min() >= 0.0 and d.max() <= 1.0


class TestIntegralImage:
    def test_zero(self):
        assert not integral_image(GrayImage(np.zeros((3, 3)))).data.any()

    def test_ones_2x2(self):
        np.testing.assert_array_equal(integral_image(GrayImage(np.ones((2, 2)))).data, [[1, 2], [2, 4]])

    def test_matches_brute_force(self, rng):
        a = rng.random((5, 5))
        np.testing.assert_allclose(integral_image(GrayImage(a)).data, brute_integral(a), rtol=0, atol=1e-9)

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=unit))
    def test_monotone_and_total(self, a):
        ii = integral_image(GrayImage(a)).data
        assert np.all(np.diff(ii, axis=0) >= -1e-12)
        assert np.all(np.diff(ii, axis=1) >= -1e-12)
        assert ii[-1, -1] == pytest.approx(a.sum(), abs=1e-9)

    @given(
        arrays(np.float64, (4, 5), elements=unit),
        arrays(np.float64, (4, 5), elements=unit),
        st.floats(0, 1),
    )
    def test_linear(self, a, b, t):
        lhs = integral_image(GrayImage(t * a + (1 - t) * b)).data
        rhs = t * integral_image(GrayImage(a)).data + (1 - t) * integral_image(GrayImage(b)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestBoxSum:
    def test_full_image(self):
        assert box_sum(integral_image(GrayImage(np.ones((4, 4)))), Rect(0, 0, 4, 4)) == 16

    def test_single_pixel(self, rng):
        a = rng.random((6, 7))
        ii = integral_image(GrayImage(a))
        for y in range(6):
            for x in range(7):
                assert box_sum(ii, Rect(x, y, 1, 1)) == pytest.approx(a[y, x], abs=1e-12)

    def test_random_rects_match_direct_sum(self, rng):
        a = rng.random((23, 31))
        ii = integral_image(GrayImage(a))
        for _ in range(100):
            x, y = rng.integers(0, 31), rng.integers(0, 23)
            w, h = rng.integers(1, 32 - x), rng.integers(1, 24 - y)
            assert abs(box_sum(ii, Rect(x, y, w, h)) - a[y : y + h, x : x + w].sum()) <= 1e-9

    @pytest.mark.parametrize("r", [Rect(-1, 0, 2, 2), Rect(3, 3, 2, 2), Rect(0, 0, 5, 1)])
    def test_out_of_bounds(self, r):
        with pytest.raises(BoundsError):
            box_sum(integral_image(GrayImage(np.ones((4, 4)))), r)

    def test_degenerate_rect_rejected(self):
        with pytest.raises(BoundsError):
            Rect(0, 0, 0, 1)

    def test_vectorised_clips(self, rng):
        a = rng.random((6, 6))
        ii = integral_image(GrayImage(a))
        got = box_sums(ii, np.array([-2, 1, 4]), np.array([-2, 2, 5]), np.array([3, 4, 9]), np.array([2, 4, 9]))
        np.testing.assert_allclose(got, [a[0:2, 0:3].sum(), a[2:4, 1:4].sum(), a[5:6, 4:6].sum()], atol=1e-12)

    @settings(max_examples=50)
    @given(st.data())
    def test_property_any_rect(self, data):
        h, w = data.draw(st.integers(1, 9)), data.draw(st.integers(1, 9))
        a = data.draw(arrays(np.float64, (h, w), elements=unit))
        x, y = data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1))
        rw, rh = data.draw(st.integers(1, w - x)), data.draw(st.integers(1, h - y))
        got = box_sum(integral_image(GrayImage(a)), Rect(x, y, rw, rh))
        assert abs(got - a[y : y + rh, x : x + rw].sum()) <= 1e-9


class TestResize:
    def test_identity(self, rng):
        img = GrayImage(rng.random((7, 9)))
        assert np.array_equal(resize(img, 9, 7).data, img.data)

    def test_constant(self):
        out = resize(GrayImage(np.full((5, 8), 0.3)), 13, 3)
        np.testing.assert_allclose(out.data, 0.3, atol=1e-15)

    def test_ramp_upscale(self):
        w = 8
        ramp = np.tile(np.arange(w) / (w - 1), (4, 1))
        out = resize(GrayImage(ramp), 2 * w, 4).data
        # pixel-centre mapping: u = (j + 0.5) / 2 - 0.5, clamped to [0, w - 1]
        u = np.clip((np.arange(2 * w) + 0.5) / 2 - 0.5, 0, w - 1)
        np.testing.assert_allclose(out[0], u / (w - 1), atol=1e-6)

    def test_zero_dimension(self):
        with pytest.raises(ImageError):
            resize(GrayImage(np.zeros((2, 2))), 0, 3)

    @given(arrays(np.float64, (5, 6), elements=unit), st.integers(1, 12), st.integers(1, 12))
    def test_stays_in_range(self, a, w, h):
        d = resize(GrayImage(a), w, h).data
        assert d.shape == (h, w) and d.min() >= 0.0 and d.max() <= 1.0


class TestPgm:
    def test_binary_round_trip(self, tmp_path, rng):
        a = np.floor(rng.random((5, 7)) * 255 + 0.5) / 255
        write_pgm(tmp_path / "a.pgm", GrayImage(a))
        assert np.array_equal(read_image(tmp_path / "a.pgm").data, a)

    def test_ascii_with_comments(self):
        buf = b"P2\n# comment\n3 2\n# another\n4\n0 1 2\n3 4 0\n"
        np.testing.assert_array_equal(decode_pgm(buf).data, [[0, 0.25, 0.5], [0.75, 1, 0]])

    def test_sixteen_bit(self):
        buf = b"P5 2 1 65535\n" + np.array([0, 65535], dtype=">u2").tobytes()
        np.testing.assert_array_equal(decode_pgm(buf).data, [[0.0, 1.0]])

    def test_truncated_raster(self):
        with pytest.raises(ImageError, match="truncated"):
            decode_pgm(b"P5\n4 4\n255\n" + bytes(5))

    def test_bad_magic(self):
        with pytest.raises(ImageError):
            decode_pgm(b"P6\n1 1\n255\n\x00")

    def test_encode_header(self):
        assert encode_pgm(GrayImage(np.zeros((2, 3)))).startswith(b"P5\n3 2\n255\n")

    def test_jpeg_via_pillow(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.full((4, 6, 3), 128, dtype=np.uint8)).save(tmp_path / "g.jpg")
        img = read_image(tmp_path / "g.jpg")
        assert img.shape == (4, 6)
        assert abs(img.data.mean() - 128 / 255) < 0.02

    def test_sniff_rejects_garbage(self, tmp_path):
        (tmp_path / "x.jpg").write_bytes(b"not an image")
        with pytest.raises(ImageError):
            sniff_image(tmp_path / "x.jpg")


def test_gaussian_kernel():
    k = gaussian_kernel_1d(1.5)
    assert len(k) == 2 * 5 + 1
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k[::-1])
