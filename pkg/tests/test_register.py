import math

import numpy as np
import pytest

from keyreg.descriptor import PatchDescriptorSource
from keyreg.detect import DetectorParams, detect_keypoints
from keyreg.errors import (
    ConfigError,
    DegenerateConfiguration,
    EmptyDescriptorSet,
    InsufficientMatches,
    NoConsensus,
)
from keyreg.imagecore import Homography, Keypoint, apply_homography_points
from keyreg.register import (
    STATUS_ERROR,
    STATUS_INSUFFICIENT,
    STATUS_OK,
    Match,
    RansacConfig,
    RegisterConfig,
    RegistrationResult,
    adaptive_iterations,
    dlt_homography,
    estimate_at_working_resolution,
    filter_to_roi,
    has_collinear_triple,
    match_descriptors,
    ransac_homography,
    register_pair,
    render_overlay,
    scale_homography,
    scale_keypoints,
    symmetric_transfer_error,
    working_roi,
)


def planted_homography(rng):
    m = np.eye(3) + rng.uniform(-0.1, 0.1, size=(3, 3))
    m[2, :2] = rng.uniform(-2e-4, 2e-4, size=2)
    m[:2, 2] = rng.uniform(-30, 30, size=2)
    return Homography(m)


def correspondences(rng, h, n_inliers=60, n_outliers=40, size=500.0):
    """Matched keypoints where the first n_inliers follow h (moving -> fixed)."""
    moving = rng.uniform(0, size, size=(n_inliers + n_outliers, 2))
    fixed = apply_homography_points(h, moving)
    fixed[n_inliers:] = rng.uniform(0, size, size=(n_outliers, 2))
    kps_f = [Keypoint(x, y) for x, y in fixed]
    kps_m = [Keypoint(x, y) for x, y in moving]
    matches = [Match(i, i, 0.0) for i in range(len(moving))]
    return matches, kps_f, kps_m


def mean_grid_error(h_est, h_true, size=500.0):
    g = np.linspace(0, size, 11)
    pts = np.array([(x, y) for x in g for y in g])
    return float(np.mean(np.linalg.norm(apply_homography_points(h_est, pts) - apply_homography_points(h_true, pts), axis=1)))


class TestMatching:
    def test_identical_sets(self, rng):
        d = rng.normal(size=(20, 8))
        matches = match_descriptors(d, d)
        assert sorted((m.index_fixed, m.index_moving) for m in matches) == [(i, i) for i in range(20)]
        assert all(m.distance == 0.0 for m in matches)

    def test_mutual_only(self):
        a = np.array([[0.0], [1.0]])
        b = np.array([[0.1], [0.2], [5.0]])
        # b[1] is closest to a[0], so a[1] -> b[1] is one-sided
        matches = match_descriptors(a, b)
        assert [(m.index_fixed, m.index_moving) for m in matches] == [(0, 0)]

    def test_sorted_by_distance(self, rng):
        matches = match_descriptors(rng.normal(size=(30, 4)), rng.normal(size=(25, 4)))
        distances = [m.distance for m in matches]
        assert distances == sorted(distances)
        assert len({m.index_fixed for m in matches}) == len(matches)
        assert len({m.index_moving for m in matches}) == len(matches)

    def test_equals_exhaustive_mutual_nn(self, rng):
        a = rng.normal(size=(200, 16))
        b = rng.normal(size=(200, 16))
        dist = [[float(np.linalg.norm(a[i] - b[j])) for j in range(200)] for i in range(200)]
        expected = set()
        for i in range(200):
            j = min(range(200), key=lambda col: dist[i][col])
            if min(range(200), key=lambda row: dist[row][j]) == i:
                expected.add((i, j))
        assert {(m.index_fixed, m.index_moving) for m in match_descriptors(a, b)} == expected

    def test_swapping_inputs_swaps_matches(self, rng):
        a = rng.normal(size=(60, 8))
        b = rng.normal(size=(45, 8))
        forward = {(m.index_fixed, m.index_moving): m.distance for m in match_descriptors(a, b)}
        backward = {(m.index_moving, m.index_fixed): m.distance for m in match_descriptors(b, a)}
        assert forward.keys() == backward.keys()
        for pair, distance in forward.items():
            assert backward[pair] == pytest.approx(distance)

    def test_empty(self):
        with pytest.raises(EmptyDescriptorSet):
            match_descriptors(np.zeros((0, 3)), np.ones((2, 3)))


class TestDlt:
    def test_noise_free_recovery(self, rng):
        for _ in range(20):
            h = planted_homography(rng)
            src = rng.uniform(0, 500, size=(20, 2))
            est = dlt_homography(src, apply_homography_points(h, src))
            np.testing.assert_allclose(est.matrix, h.matrix, atol=1e-8)

    def test_minimal_set(self, rng):
        h = planted_homography(rng)
        src = np.array([[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]])
        est = dlt_homography(src, apply_homography_points(h, src))
        np.testing.assert_allclose(est.matrix, h.matrix, atol=1e-8)

    def test_collinear_minimal_set(self):
        src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]])
        with pytest.raises(DegenerateConfiguration):
            dlt_homography(src, src + 1.0)

    def test_too_few(self):
        with pytest.raises(DegenerateConfiguration):
            dlt_homography(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_collinear_detection(self):
        assert has_collinear_triple(np.array([[0, 0], [1, 1], [3, 3], [5, 0]]))
        assert not has_collinear_triple(np.array([[0, 0], [10, 0], [0, 10], [10, 10]]))

    def test_transfer_error_zero_for_exact(self, rng):
        h = planted_homography(rng)
        src = rng.uniform(0, 500, size=(10, 2))
        err = symmetric_transfer_error(h, src, apply_homography_points(h, src))
        assert err.max() < 1e-9


class TestRansac:
    def test_adaptive_iterations(self):
        assert adaptive_iterations(1.0, 0.99, 1000) == 1
        assert adaptive_iterations(0.0, 0.99, 1000) == 1000
        assert adaptive_iterations(0.5, 0.99, 1000) == math.ceil(math.log(0.01) / math.log(1 - 0.5 ** 4))
        assert adaptive_iterations(0.01, 0.999, 50) == 50

    def test_recovers_planted_model(self, rng):
        h = planted_homography(rng)
        matches, kps_f, kps_m = correspondences(rng, h)
        result = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=3))
        assert result.ok
        assert mean_grid_error(result.homography, h) < 1e-6
        inlier_ids = {m.index_fixed for m in result.inliers}
        assert set(range(60)) <= inlier_ids
        assert len(inlier_ids - set(range(60))) <= 2
        assert len(result.residuals) == len(result.inliers)
        assert result.num_matches == 100

    def test_noisy_inliers(self, rng):
        h = planted_homography(rng)
        matches, kps_f, kps_m = correspondences(rng, h)
        kps_f = [Keypoint(kp.x + rng.normal(0, 0.5), kp.y + rng.normal(0, 0.5)) for kp in kps_f]
        result = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=3))
        assert mean_grid_error(result.homography, h) < 2.0

    def test_heavy_outlier_share(self):
        kept = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            h = planted_homography(rng)
            matches, kps_f, kps_m = correspondences(rng, h, n_inliers=30, n_outliers=70)
            result = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=trial))
            if set(range(30)) <= {m.index_fixed for m in result.inliers}:
                kept += 1
        assert kept >= 99

    def test_seeded(self, rng):
        h = planted_homography(rng)
        matches, kps_f, kps_m = correspondences(rng, h)
        a = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=7))
        b = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=7))
        np.testing.assert_array_equal(a.homography.matrix, b.homography.matrix)
        assert a.iterations == b.iterations

    def test_too_few_matches(self):
        kps = [Keypoint(0, 0), Keypoint(1, 0), Keypoint(0, 1)]
        with pytest.raises(InsufficientMatches):
            ransac_homography([Match(i, i, 0.0) for i in range(3)], kps, kps, RansacConfig())

    def test_no_consensus(self, rng):
        kps_f = [Keypoint(x, y) for x, y in rng.uniform(0, 500, size=(30, 2))]
        kps_m = [Keypoint(x, y) for x, y in rng.uniform(0, 500, size=(30, 2))]
        matches = [Match(i, i, 0.0) for i in range(30)]
        with pytest.raises(NoConsensus):
            ransac_homography(matches, kps_f, kps_m, RansacConfig(max_iterations=200, min_inliers=10))

    @pytest.mark.parametrize("kwargs", [
        {"inlier_threshold": 0.0},
        {"confidence": 1.0},
        {"max_iterations": 0},
        {"min_inliers": 3},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            RansacConfig(**kwargs)


class TestResolution:
    def test_scale_keypoints(self):
        out = scale_keypoints([Keypoint(10, 20, 0.5)], (100, 200), (50, 50))
        assert out == [Keypoint(5.0, 5.0, 0.5)]

    def test_scale_homography_commutes_with_point_scaling(self, rng):
        h = planted_homography(rng)
        native = (400, 300)
        work = (200, 200)
        h_work = scale_homography(h, native, work)
        pts = rng.uniform(0, 300, size=(10, 2))
        s = np.array([work[0] / native[0], work[1] / native[1]])
        np.testing.assert_allclose(
            apply_homography_points(h_work, pts * s), apply_homography_points(h, pts) * s, atol=1e-9
        )

    def test_estimate_at_working(self, rng):
        h = planted_homography(rng)
        matches, kps_f, kps_m = correspondences(rng, h)
        native = (500, 500)
        work = (250, 250)
        result = estimate_at_working_resolution(
            matches, scale_keypoints(kps_f, native, work), scale_keypoints(kps_m, native, work),
            work, native, native, RansacConfig(seed=1),
        )
        assert mean_grid_error(result.homography, h) < 1e-6


class TestRois:
    def test_filter_to_roi(self):
        roi = np.zeros((10, 10), dtype=bool)
        roi[:, :5] = True
        kps = [Keypoint(2, 2), Keypoint(4.6, 3), Keypoint(8, 8), Keypoint(-1, 0)]
        assert filter_to_roi(kps, roi) == [Keypoint(2, 2)]
        assert filter_to_roi(kps, None) == kps

    def test_working_roi_is_eroded(self, fundus):
        roi = working_roi(fundus.image, fundus.roi, 128, 4)
        assert roi.sum() < fundus.roi.sum()
        assert not (roi & ~fundus.roi).any()


class TestRegisterPair:
    def test_synthetic_pair(self, fundus_pair):
        cfg = RegisterConfig(working_size=192)
        result = register_pair(
            fundus_pair.fixed.image, fundus_pair.moving.image, DetectorParams("harris"), PatchDescriptorSource(11),
            cfg, fundus_pair.fixed.roi, fundus_pair.moving.roi,
        )
        assert result.status == STATUS_OK, result.message
        mapped = apply_homography_points(result.homography, fundus_pair.moving_points)
        errors = np.linalg.norm(mapped - fundus_pair.fixed_points, axis=1)
        assert errors.mean() < 3.0

    def test_identity_pair_with_callable_detector(self, fundus):
        def corners(img, roi):
            return detect_keypoints(img, DetectorParams("harris"), roi)

        result = register_pair(fundus.image, fundus.image, corners, PatchDescriptorSource(11),
                               RegisterConfig(working_size=128), fundus.roi, fundus.roi)
        assert result.ok
        np.testing.assert_allclose(result.homography.matrix, np.eye(3), atol=1e-6)

    def test_precomputed_keypoints(self, fundus):
        kps = [Keypoint(float(x), float(y)) for x in range(30, 100, 9) for y in range(30, 100, 9)]
        result = register_pair(fundus.image, fundus.image, None, PatchDescriptorSource(11),
                               RegisterConfig(working_size=128), keypoints=(kps, kps))
        assert result.ok
        assert result.num_keypoints[0] > 0

    def test_no_detector(self, fundus):
        result = register_pair(fundus.image, fundus.image, None, PatchDescriptorSource(11), RegisterConfig(working_size=128))
        assert result.status == STATUS_ERROR
        assert result.message.startswith("detect:")

    def test_blank_images_report_insufficient(self):
        blank = np.zeros((64, 64, 3), dtype=np.float32)
        roi = np.ones((64, 64), dtype=bool)
        result = register_pair(blank, blank, DetectorParams("harris"), PatchDescriptorSource(11),
                               RegisterConfig(working_size=64), roi, roi)
        assert result.status == STATUS_INSUFFICIENT
        assert result.homography is None

    def test_result_dict(self):
        result = RegistrationResult(Homography.identity(), [Match(0, 0, 0.0)], 3, residuals=[0.5])
        data = result.to_dict()
        assert data["status"] == "ok"
        assert data["inlier_count"] == 1
        assert data["homography"][2][2] == 1.0

    def test_overlay(self, fundus):
        overlay = render_overlay(fundus.image, fundus.image, Homography.identity())
        assert overlay.shape == (128, 128, 3)
        np.testing.assert_allclose(overlay[..., 0], overlay[..., 1])


@pytest.mark.slow
class TestPlantedOracle:
    def test_recovery_rate(self):
        corners = np.array([[0.0, 0.0], [500.0, 0.0], [0.0, 500.0], [500.0, 500.0]])
        recovered = 0
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            h = planted_homography(rng)
            matches, kps_f, kps_m = correspondences(rng, h, n_inliers=30, n_outliers=int(rng.integers(0, 31)))
            try:
                result = ransac_homography(matches, kps_f, kps_m, RansacConfig(seed=seed))
            except (NoConsensus, InsufficientMatches, DegenerateConfiguration):
                continue
            error = np.linalg.norm(
                apply_homography_points(result.homography, corners) - apply_homography_points(h, corners), axis=1
            ).mean()
            recovered += error < 2.0
        assert recovered >= 990
