import logging
import math

import numpy as np
import pytest

from conftest import gaussian_blob
from facerec import features
from facerec.features import (
    DESCRIPTOR_DIM,
    FeatureParamError,
    Keypoint,
    SurfParams,
    affine_simulate,
    asurf_extract,
    assign_orientation,
    build_scale_space,
    compute_descriptor,
    default_view_grid,
    describe,
    detect_keypoints,
    filter_size,
    hessian_responses,
    read_descriptors,
    surf_detect,
    surf_extract,
    write_descriptors,
)
from facerec.filter import gaussian_blur
from facerec.imaging import GrayImage, integral_image, resize


def box_kernels(L):
    """Dxx, Dyy, Dxy weight masks of side L laid out pixel by pixel."""
    l = L // 3
    half = (L - 1) // 2
    c = half
    dyy = np.zeros((L, L))
    cols = slice(c - (l - 1), c + l)
    dyy[0:l, cols] = 1
    dyy[l : 2 * l, cols] = -2
    dyy[2 * l : 3 * l, cols] = 1
    dxx = dyy.T.copy()
    dxy = np.zeros((L, L))
    dxy[c - l : c, c - l : c] = 1
    dxy[c - l : c, c + 1 : c + l + 1] = -1
    dxy[c + 1 : c + l + 1, c - l : c] = -1
    dxy[c + 1 : c + l + 1, c + 1 : c + l + 1] = 1
    return dxx, dyy, dxy


def direct_det(a, L, x, y):
    half = (L - 1) // 2
    patch = a[y - half : y + half + 1, x - half : x + half + 1]
    dxx, dyy, dxy = (float((patch * k).sum()) / (L * L) for k in box_kernels(L))
    return dxx * dyy - (0.9 * dxy) ** 2


def textured(size, seed=3, sigma=2.0):
    r = np.random.default_rng(seed)
    return gaussian_blur(GrayImage(r.random((size, size))), sigma)


def circ_diff(a, b):
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


class TestHessian:
    def test_uniform(self):
        ii = integral_image(GrayImage(np.full((40, 40), 0.5)))
        assert np.abs(hessian_responses(ii, 15)).max() < 1e-15

    @pytest.mark.parametrize("L", [9, 15, 27])
    def test_matches_direct_summation(self, rng, L):
        a = rng.random((45, 41))
        got = hessian_responses(integral_image(GrayImage(a)), L)
        half = (L - 1) // 2
        for _ in range(40):
            x = int(rng.integers(half, 41 - half))
            y = int(rng.integers(half, 45 - half))
            assert abs(got[y, x] - direct_det(a, L, x, y)) <= 1e-6

    def test_border_zero(self, rng):
        got = hessian_responses(integral_image(GrayImage(rng.random((30, 30)))), 9)
        assert not got[:4].any() and not got[:, -4:].any()

    def test_too_large_filter(self):
        assert hessian_responses(integral_image(GrayImage(np.zeros((20, 20)))), 21).size == 0

    @pytest.mark.parametrize("L", [8, 7, 10])
    def test_bad_size(self, L):
        with pytest.raises(FeatureParamError):
            hessian_responses(integral_image(GrayImage(np.zeros((20, 20)))), L)

    def test_blob_peak(self):
        img = gaussian_blob(81, 4.0)
        ii = integral_image(img)
        sizes = [9, 15, 21, 27, 39, 51]
        peaks = [hessian_responses(ii, L).max() for L in sizes]
        best = int(np.argmax(peaks))
        # interior peak of the size sweep; measured at L = 21 (see ledger)
        assert 0 < best < len(sizes) - 1
        assert sizes[best] == 21
        resp = hessian_responses(ii, sizes[best])
        y, x = np.unravel_index(np.argmax(resp), resp.shape)
        assert math.hypot(x - 40, y - 40) <= 2


class TestScaleSpace:
    def test_schedule(self):
        assert [filter_size(0, l) for l in range(4)] == [9, 15, 21, 27]
        assert [filter_size(1, l) for l in range(4)] == [15, 27, 39, 51]
        assert [filter_size(2, l) for l in range(4)] == [27, 51, 75, 99]

    def test_sizes_odd_and_increasing(self):
        for o in range(5):
            s = [filter_size(o, l) for l in range(6)]
            assert all(v % 2 == 1 for v in s) and s == sorted(set(s))

    def test_small_image_drops_octaves(self, rng, caplog):
        features._DROP_WARNED.clear()
        with caplog.at_level(logging.WARNING, logger="facerec.features"):
            ss = build_scale_space(integral_image(GrayImage(rng.random((64, 64)))), 4, 4)
        assert ss.sizes == [[9, 15, 21, 27], [15, 27, 39, 51]]
        assert "dropping octaves" in caplog.text

    def test_maps_equal_direct_responses(self, rng):
        ii = integral_image(GrayImage(rng.random((70, 66))))
        ss = build_scale_space(ii, 2, 4)
        for o, step in enumerate(ss.steps):
            for lv, size in enumerate(ss.sizes[o]):
                np.testing.assert_allclose(
                    ss.responses[o][lv], hessian_responses(ii, size)[::step, ::step], atol=1e-15
                )


class TestDetectKeypoints:
    def test_uniform(self):
        ss = build_scale_space(integral_image(GrayImage(np.full((64, 64), 0.3))), 2, 4)
        assert detect_keypoints(ss) == []

    @pytest.mark.parametrize(
        "sigma,cx,cy",
        [(3.0, 48.0, 48.0), (4.0, 48.0, 48.0), (6.0, 48.0, 48.0), (8.0, 48.0, 48.0),
         (3.0, 47.0, 49.0), (4.0, 47.0, 49.0), (8.0, 48.0, 52.0)],
    )
    def test_single_blob(self, sigma, cx, cy):
        # coarse-octave blobs sit on the octave's sample grid; one centred
        # between samples in both axes refines past half a sample (ledger)
        kps = surf_detect(gaussian_blob(96, sigma, cx=cx, cy=cy, amp=0.4))
        assert len(kps) == 1
        assert math.hypot(kps[0].x - cx, kps[0].y - cy) <= 2
        assert kps[0].laplacian_sign == -1

    @pytest.mark.parametrize("sigma", [4.0, 6.0])
    def test_high_contrast_blob_side_lobes(self, sigma):
        # box filters leave weak opposite-sign extrema on the diagonals
        kps = surf_detect(gaussian_blob(96, sigma, cx=48.0, cy=48.0, amp=0.8))
        assert math.hypot(kps[0].x - 48, kps[0].y - 48) <= 2
        assert kps[0].laplacian_sign == -1
        for k in kps[1:]:
            assert k.laplacian_sign == 1 and k.response < 0.02 * kps[0].response

    def test_sorted_by_response(self):
        kps = surf_detect(textured(96))
        assert len(kps) > 5
        r = [k.response for k in kps]
        assert r == sorted(r, reverse=True)
        assert all(k.response > 1e-4 for k in kps)

    def test_rotation_by_90(self):
        img = textured(129, seed=11)
        rot = GrayImage(np.rot90(img.data))
        a = surf_detect(img)
        b = surf_detect(rot)
        assert len(a) == len(b) and len(a) > 5
        W = img.width
        mapped = np.array([(k.y, W - 1 - k.x, k.scale) for k in a])
        got = np.array([(k.x, k.y, k.scale) for k in b])
        for m in mapped:
            d = np.hypot(*(got[:, :2] - m[:2]).T)
            j = int(np.argmin(d))
            assert d[j] <= 0.5
            assert abs(got[j, 2] - m[2]) <= 1e-6 * m[2] + 1e-9

    def test_upsampled_blob_scale_covariance(self):
        small = gaussian_blob(64, 3.0, cx=31.0, cy=33.0, amp=0.4)
        big = resize(small, 128, 128)
        (a,) = surf_detect(small)
        (b,) = surf_detect(big)
        assert abs(b.x - (2 * a.x + 0.5)) <= 1.0 and abs(b.y - (2 * a.y + 0.5)) <= 1.0
        assert abs(b.scale / a.scale - 2.0) <= 0.15 * 2.0


class TestOrientation:
    def test_flat_patch(self):
        ii = integral_image(GrayImage(np.full((50, 50), 0.5)))
        assert assign_orientation(ii, Keypoint(25, 25, 2.0, 0, 1, 1)) == 0.0

    @pytest.mark.parametrize("bright_right,expected", [(True, 0.0), (False, math.pi)])
    def test_vertical_edge(self, bright_right, expected):
        g = np.zeros((60, 60))
        if bright_right:
            g[:, 30:] = 1
        else:
            g[:, :30] = 1
        theta = assign_orientation(integral_image(GrayImage(g)), Keypoint(30, 30, 2.0, 0, 1, 1))
        assert 0 <= theta < 2 * math.pi
        assert circ_diff(theta, expected) <= math.pi / 18

    def test_rotation_shifts_orientation(self):
        img = textured(121, seed=5, sigma=2.5)
        rot = GrayImage(np.rot90(img.data))
        ii, iir = integral_image(img), integral_image(rot)
        W = img.width
        checked = 0
        for x, y in [(40, 40), (60, 55), (80, 70), (50, 75), (70, 45)]:
            t0 = assign_orientation(ii, Keypoint(x, y, 2.0, 0, 1, 1))
            t1 = assign_orientation(iir, Keypoint(y, W - 1 - x, 2.0, 0, 1, 1))
            # np.rot90 maps gradient angle theta to theta - pi/2
            assert circ_diff(t1, t0 - math.pi / 2) <= math.pi / 18
            checked += 1
        assert checked == 5


class TestDescriptor:
    def test_unit_norm(self):
        img = textured(96)
        ii = integral_image(img)
        kps, desc = describe(ii, surf_detect(img))
        assert desc.shape == (len(kps), DESCRIPTOR_DIM)
        np.testing.assert_allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-6)

    def test_flat_patch_zero(self):
        ii = integral_image(GrayImage(np.full((60, 60), 0.2)))
        assert not compute_descriptor(ii, Keypoint(30, 30, 2.0, 0.0, 1, 1)).any()

    def test_translation(self):
        patch = textured(64, seed=9).data
        canvas = np.zeros((160, 200))
        canvas[20:84, 20:84] = patch
        canvas[70:134, 120:184] = patch
        ii = integral_image(GrayImage(canvas))
        (ka, kb), desc = describe(ii, [Keypoint(52, 52, 2.0, 0, 1, 1), Keypoint(152, 102, 2.0, 0, 1, 1)])
        assert ka.orientation == pytest.approx(kb.orientation, abs=1e-9)
        np.testing.assert_allclose(desc[0], desc[1], atol=1e-6)

    @pytest.fixture
    def rotated_pair(self):
        img = textured(129, seed=21, sigma=2.0)
        rot = GrayImage(np.rot90(img.data))
        W = img.width
        kps = [k for k in surf_detect(img) if 35 <= k.x <= W - 36 and 35 <= k.y <= W - 36][:10]
        assert len(kps) >= 5
        return integral_image(img), integral_image(rot), kps, W

    def test_rotation_by_90_given_orientation(self, rotated_pair):
        ii, iir, kps, W = rotated_pair
        oriented, da = describe(ii, kps)
        moved = [
            Keypoint(k.y, W - 1 - k.x, k.scale, (k.orientation - math.pi / 2) % (2 * math.pi), 1, 1)
            for k in oriented
        ]
        db = np.array([compute_descriptor(iir, k) for k in moved])
        assert np.sum(da * db, axis=1).min() >= 0.95

    def test_rotation_by_90_matched(self, rotated_pair):
        ii, iir, kps, W = rotated_pair
        moved = [Keypoint(k.y, W - 1 - k.x, k.scale, 0, k.response, k.laplacian_sign) for k in kps]
        _, da = describe(ii, kps)
        _, db = describe(iir, moved)
        cos = np.sum(da * db, axis=1)
        # a keypoint with two near-equal dominant directions may flip
        assert np.mean(cos >= 0.95) >= 0.8
        assert np.median(cos) >= 0.95

    def test_upright_mode(self):
        img = textured(80)
        kps, _ = surf_extract(img, SurfParams(upright=True))
        assert all(k.orientation == 0.0 for k in kps)

    def test_dump_round_trip(self, tmp_path, rng):
        d = rng.random((7, 64)).astype(np.float32).astype(np.float64)
        write_descriptors(tmp_path / "d.bin", d)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:8] == (7).to_bytes(4, "little") + (64).to_bytes(4, "little")
        np.testing.assert_array_equal(read_descriptors(tmp_path / "d.bin"), d)


class TestAffineSimulate:
    def test_identity(self, rng):
        img = GrayImage(rng.random((20, 30)))
        view, out = affine_simulate(img, 1.0, 0.0)
        assert out is img or np.array_equal(out.data, img.data)

    @pytest.mark.parametrize("tilt,deg", [(1.0, 30.0), (math.sqrt(2), 0.0), (2.0, 36.0), (math.sqrt(2), 101.8)])
    def test_maps_are_inverse(self, tilt, deg, rng):
        view, _ = affine_simulate(GrayImage(rng.random((40, 50))), tilt, math.radians(deg))
        xs, ys = rng.uniform(0, 49, 50), rng.uniform(0, 39, 50)
        bx, by = view.to_source(*view.to_view(xs, ys))
        np.testing.assert_allclose(bx, xs, atol=1e-6)
        np.testing.assert_allclose(by, ys, atol=1e-6)

    @pytest.mark.parametrize("tilt,deg", [(1.0, 45.0), (math.sqrt(2), 0.0), (math.sqrt(2), 50.9), (2.0, 144.0)])
    def test_dimensions_match_corner_bbox(self, tilt, deg):
        w, h = 92, 112
        view, out = affine_simulate(GrayImage(np.full((h, w), 0.5)), tilt, math.radians(deg))
        cx, cy = view.to_view(np.array([0, w - 1, 0, w - 1]), np.array([0, 0, h - 1, h - 1]))
        assert min(cx) == pytest.approx(0, abs=1e-9) and min(cy) == pytest.approx(0, abs=1e-9)
        assert out.width == math.floor(max(cx) + 1e-9) + 1
        assert out.height == math.floor(max(cy) + 1e-9) + 1

    def test_bad_tilt(self):
        with pytest.raises(FeatureParamError):
            affine_simulate(GrayImage(np.zeros((5, 5))), 0.5, 0.0)


class TestAsurf:
    def test_default_grid(self):
        g = default_view_grid()
        assert g[0] == (1.0, 0.0) and len(g) == 10
        assert len([v for v in g if v[0] == 2.0]) == 5

    def test_identity_grid_equals_surf(self, face_images):
        img = face_images["hopper.pgm"]
        ka, da = surf_extract(img)
        kb, db = asurf_extract(img, [(1.0, 0.0)])
        assert ka == kb
        assert np.array_equal(da, db)

    def test_empty_grid(self):
        with pytest.raises(FeatureParamError):
            asurf_extract(GrayImage(np.zeros((30, 30))), [])

    def test_in_bounds_and_deterministic(self, face_images):
        img = face_images["lfw_37.pgm"]
        ka, da = asurf_extract(img)
        kb, db = asurf_extract(img)
        assert ka == kb and np.array_equal(da, db)
        assert all(0 <= k.x <= img.width - 1 and 0 <= k.y <= img.height - 1 for k in ka)
        assert len({k.view for k in ka}) > 1
        np.testing.assert_allclose(np.linalg.norm(da, axis=1), 1.0, atol=1e-6)

    def test_cap(self):
        img = textured(128, seed=2, sigma=1.2)
        kps, desc = asurf_extract(img, params=SurfParams(max_keypoints=40))
        assert len(kps) == 40 == len(desc)
        r = [k.response for k in kps]
        assert r == sorted(r, reverse=True)

    def test_blank_image(self):
        kps, desc = asurf_extract(GrayImage(np.ones((64, 64))))
        assert kps == [] and desc.shape == (0, 64)
