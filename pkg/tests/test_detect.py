import itertools

import numpy as np
import pytest

from keyreg.detect import (
    DetectorParams,
    censure_responses,
    censure_sizes,
    censure_star,
    censure_star_with_scales,
    detect_keypoints,
    dog_detect,
    fast,
    grid_keypoints,
    harris,
    harris_response,
    nms,
    orb_detect,
)
from keyreg.errors import ConfigError, EmptyImage, EmptyRoi, ImageTooSmall, NonGrayInput
from keyreg.imagecore import Keypoint

from conftest import smooth_texture

POINT_DETECTORS = [("harris", harris), ("fast", fast), ("orb", orb_detect)]
ALL_DETECTORS = POINT_DETECTORS + [("dog", dog_detect), ("censure", censure_star)]


def locations(kps):
    return {(kp.x, kp.y) for kp in kps}


def nearest(kps, point):
    return min(kps, key=lambda kp: np.hypot(kp.x - point[0], kp.y - point[1]))


def distance(kp, point):
    return float(np.hypot(kp.x - point[0], kp.y - point[1]))


def gaussian_blob(size, center, sigma, amplitude=0.8):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return amplitude * np.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2 * sigma ** 2))


def disc(size, center, radius, inside=1.0, outside=0.0):
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.full((size, size), outside, dtype=np.float64)
    img[(xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2] = inside
    return img


class TestParams:
    def test_defaults_fill_sensitivity(self):
        assert DetectorParams("fast").sensitivity == 0.05
        assert DetectorParams("harris").sensitivity == 1e-4

    @pytest.mark.parametrize("kwargs", [
        {"kind": "sift"},
        {"sensitivity": -1.0},
        {"nms_radius": -0.5},
        {"harris_k": 0.3},
        {"fast_n": 8},
        {"dog_octaves": 0},
        {"censure_scales": 2},
        {"grid_target": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DetectorParams(**kwargs)

    def test_with_sensitivity(self):
        p = DetectorParams("harris").with_sensitivity(0.5)
        assert p.sensitivity == 0.5 and p.kind == "harris"


class TestInputChecks:
    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_empty(self, name, fn):
        with pytest.raises(EmptyImage):
            fn(np.zeros((0, 0)), DetectorParams(name))

    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_colour_rejected(self, name, fn):
        with pytest.raises(NonGrayInput):
            fn(np.zeros((64, 64, 3)), DetectorParams(name))

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            harris(np.zeros((6, 20)), DetectorParams("harris"))
        with pytest.raises(ImageTooSmall):
            dog_detect(np.zeros((31, 64)), DetectorParams("dog"))
        with pytest.raises(ImageTooSmall):
            censure_star(np.zeros((64, 20)), DetectorParams("censure"))

    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_constant_image(self, name, fn):
        assert fn(np.full((64, 64), 0.5), DetectorParams(name, sensitivity=0.0)) == []


class TestNms:
    def test_radius_zero_only_sorts(self):
        kps = [Keypoint(5, 5, 0.1), Keypoint(1, 1, 0.9), Keypoint(3, 0, 0.9)]
        out = nms(kps, 0.0)
        assert out == [Keypoint(3, 0, 0.9), Keypoint(1, 1, 0.9), Keypoint(5, 5, 0.1)]

    def test_close_pair(self):
        out = nms([Keypoint(10, 10, 0.5), Keypoint(13, 10, 0.8)], 5.0)
        assert out == [Keypoint(13, 10, 0.8)]

    def test_boundary_distance_is_suppressed(self):
        out = nms([Keypoint(0, 0, 1.0), Keypoint(5, 0, 0.5)], 5.0)
        assert len(out) == 1

    def test_random_spacing(self, rng):
        pts = rng.uniform(0, 400, size=(1000, 2))
        resp = rng.uniform(0, 1, size=1000)
        out = nms([Keypoint(x, y, r) for (x, y), r in zip(pts, resp)], 8.0)
        arr = np.array([(kp.x, kp.y) for kp in out])
        d = np.hypot(*(arr[:, None, :] - arr[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        assert d.min() > 8.0
        assert [kp.response for kp in out] == sorted((kp.response for kp in out), reverse=True)


class TestHarris:
    def test_l_corner(self):
        img = np.zeros((64, 64))
        img[32:, 32:] = 1.0
        kps = harris(img, DetectorParams("harris"))
        assert kps
        assert distance(kps[0], (32, 32)) <= 1.5

    def test_responses_come_from_response_map(self):
        img = smooth_texture(64, 2.0, seed=3)
        r = harris_response(img)
        for kp in harris(img, DetectorParams("harris", nms_radius=0.0)):
            assert kp.response == r[int(kp.y), int(kp.x)]

    def test_sorted_and_spaced(self, texture):
        kps = harris(texture, DetectorParams("harris", nms_radius=4.0))
        assert [kp.response for kp in kps] == sorted((kp.response for kp in kps), reverse=True)
        for a, b in itertools.combinations(kps, 2):
            assert distance(a, (b.x, b.y)) > 4.0


class TestFast:
    def test_square_corners(self):
        img = np.zeros((50, 50))
        img[20:30, 20:30] = 1.0
        # every corner pixel scores exactly 1, so clusters tie
        kps = fast(img, DetectorParams("fast", nms_radius=1.0))
        corners = [(20, 20), (29, 20), (20, 29), (29, 29)]
        for c in corners:
            assert distance(nearest(kps, c), c) <= 1.5
        for kp in kps:
            assert min(distance(kp, c) for c in corners) <= 2.0

    def test_threshold_over_differences(self):
        img = np.zeros((50, 50))
        img[20:30, 20:30] = 0.3
        p = DetectorParams("fast", sensitivity=0.29, nms_radius=0.0)
        assert fast(img, p)
        assert fast(img, p.with_sensitivity(0.3)) == []


class TestOrb:
    def test_subset_of_fast(self, texture):
        p = DetectorParams("orb", sensitivity=0.02)
        assert locations(orb_detect(texture, p)) <= locations(fast(texture, p))

    def test_max_keypoints(self, texture):
        p = DetectorParams("orb", sensitivity=0.0, max_keypoints=5)
        kps = orb_detect(texture, p)
        assert len(kps) <= 5

    def test_square_ranked_by_harris(self):
        img = np.zeros((50, 50))
        img[20:30, 20:30] = 1.0
        img[20:23, 20:23] = 0.8
        kps = orb_detect(img, DetectorParams("orb", sensitivity=0.0, nms_radius=1.0))
        r = harris_response(img)
        values = [r[int(kp.y), int(kp.x)] for kp in kps]
        assert values == sorted(values, reverse=True)


class TestDog:
    def test_blob_center(self):
        img = gaussian_blob(128, (64, 64), 4.0)
        kps = dog_detect(img, DetectorParams("dog", sensitivity=0.0))
        assert kps
        assert distance(kps[0], (64, 64)) <= 2.0

    def test_scale_covariance(self):
        small = dog_detect(gaussian_blob(128, (32, 32), 4.0), DetectorParams("dog", sensitivity=0.0))
        large = dog_detect(gaussian_blob(128, (64, 64), 8.0), DetectorParams("dog", sensitivity=0.0))
        assert distance(small[0], (32, 32)) <= 2.0
        assert distance(large[0], (64, 64)) <= 2.0


class TestCensure:
    def test_sizes(self):
        assert censure_sizes(5) == [2, 3, 4, 6, 8]

    @pytest.mark.parametrize("inside,outside", [(1.0, 0.0), (0.0, 1.0)])
    def test_disc(self, inside, outside):
        img = disc(128, (40, 40), 6, inside, outside)
        found = censure_star_with_scales(img, DetectorParams("censure", sensitivity=0.0))
        kp, scale = min(found, key=lambda pair: distance(pair[0], (40, 40)))
        assert distance(kp, (40, 40)) <= 2.0
        _, stack = censure_responses(img)
        best = int(np.argmax(np.abs(stack[:, 40, 40])))
        assert abs(scale - best) <= 1

    def test_scale_travels_with_keypoint(self):
        img = smooth_texture(128, 2.5, seed=3)
        _, stack = censure_responses(img)
        found = censure_star_with_scales(img, DetectorParams("censure", sensitivity=0.0, nms_radius=0.0))
        assert found
        for kp, scale in found:
            assert kp.response == abs(stack[scale, int(kp.y), int(kp.x)])
        assert [kp for kp, _ in found] == censure_star(img, DetectorParams("censure", sensitivity=0.0, nms_radius=0.0))


class TestProperties:
    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_deterministic(self, name, fn, texture):
        p = DetectorParams(name)
        assert fn(texture, p) == fn(texture.copy(), p)

    @pytest.mark.parametrize("name,fn", [("harris", harris), ("fast", fast)])
    def test_offset_invariance(self, name, fn, texture):
        img = 0.05 + 0.8 * texture
        p = DetectorParams(name, nms_radius=3.0)
        assert locations(fn(img, p)) == locations(fn(img + 0.1, p))

    @pytest.mark.parametrize("name,fn,extras,margin", [
        ("harris", harris, {}, 12),
        ("fast", fast, {}, 12),
        ("orb", orb_detect, {}, 12),
        # margins cover the widest Gaussian of two octaves and the outer star plus its line test
        ("dog", dog_detect, {"dog_octaves": 2, "sensitivity": 0.0}, 50),
        ("censure", censure_star, {"sensitivity": 0.0}, 60),
    ])
    def test_translation_equivariance(self, name, fn, extras, margin):
        big = smooth_texture(224, 2.5, seed=9)
        size = 200
        a = big[10:10 + size, 10:10 + size]
        b = big[13:13 + size, 15:15 + size]
        p = DetectorParams(name, nms_radius=0.0, **extras)

        def interior(kps, shift):
            moved = {(round(kp.x + shift[0], 6), round(kp.y + shift[1], 6)) for kp in kps}
            # b's view shifted back covers a's interior, except the strip it crops off
            return {
                pt for pt in moved
                if margin + 5 <= pt[0] < size - margin and margin + 3 <= pt[1] < size - margin
            }

        in_a = interior(fn(a, p), (0, 0))
        in_b = interior(fn(b, p), (5, 3))
        assert in_a
        assert in_a == in_b

    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_count_monotone_in_sensitivity(self, name, fn):
        img = smooth_texture(96, 2.0, seed=4)
        top = max(kp.response for kp in fn(img, DetectorParams(name, sensitivity=0.0)))
        counts = [len(fn(img, DetectorParams(name, sensitivity=t))) for t in np.linspace(0.0, top, 12)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    @pytest.mark.parametrize("name,fn", ALL_DETECTORS)
    def test_nms_postcondition(self, name, fn):
        img = smooth_texture(96, 2.0, seed=5)
        kps = fn(img, DetectorParams(name, sensitivity=0.0, nms_radius=5.0))
        for a, b in itertools.combinations(kps, 2):
            assert distance(a, (b.x, b.y)) > 5.0


class TestGrid:
    def test_full_square(self):
        kps, saturated = grid_keypoints(np.ones((100, 100), dtype=bool), 100)
        assert not saturated
        assert len(kps) == 100
        xs = sorted({kp.x for kp in kps})
        assert np.allclose(np.diff(xs), 10.0)

    def test_circle(self):
        roi = disc(160, (80, 80), 70) > 0
        kps, _ = grid_keypoints(roi, 500)
        assert 450 <= len(kps) <= 550
        assert all(roi[int(kp.y), int(kp.x)] for kp in kps)

    def test_deterministic(self):
        roi = disc(160, (80, 80), 70) > 0
        assert grid_keypoints(roi, 300) == grid_keypoints(roi, 300)

    def test_saturated(self):
        roi = np.zeros((20, 20), dtype=bool)
        roi[5:10, 5:10] = True
        kps, saturated = grid_keypoints(roi, 1000)
        assert saturated
        assert len(kps) == 25

    def test_empty_roi(self):
        with pytest.raises(EmptyRoi):
            grid_keypoints(np.zeros((10, 10), dtype=bool), 10)

    def test_dispatch_uses_roi(self):
        roi = np.zeros((100, 100), dtype=bool)
        roi[:, :50] = True
        kps = detect_keypoints(np.zeros((100, 100)), DetectorParams("grid", grid_target=50), roi)
        assert all(kp.x < 50 for kp in kps)


class TestDispatch:
    def test_colour_uses_green(self, fundus):
        p = DetectorParams("harris")
        assert detect_keypoints(fundus.image, p) == harris(fundus.image[..., 1], p)
