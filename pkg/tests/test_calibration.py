import math

import numpy as np
import pytest

from keyreg.calibration import BUDGET_PRESETS, calibrate_budget
from keyreg.detect import DetectorParams, detect_keypoints
from keyreg.errors import ConfigError

from conftest import smooth_texture


def exponential_count(img, params, roi):
    """count(t) = floor(1000 * a * exp(-t)) with a read from the image."""
    return int(math.floor(1000.0 * float(img[0, 0]) * math.exp(-params.sensitivity)))


SCALES = [np.full((1, 1), a) for a in (0.8, 1.0, 1.2)]


class TestClosedForm:
    @pytest.mark.parametrize("target", BUDGET_PRESETS)
    def test_presets_within_ten_percent(self, target):
        result = calibrate_budget(DetectorParams("harris"), SCALES, target, count_fn=exponential_count)
        assert not result.unreachable
        assert abs(result.achieved_mean - target) <= 0.1 * target

    def test_bracket_for_500(self):
        result = calibrate_budget(
            DetectorParams("fast"), [np.ones((1, 1))], 500, count_fn=exponential_count
        )
        assert 450 <= result.achieved_mean <= 550
        assert result.sensitivity == pytest.approx(math.log(2.0), abs=0.01)

    def test_unlimited(self):
        result = calibrate_budget(DetectorParams("harris"), SCALES, None, count_fn=exponential_count)
        assert result.sensitivity == 0.0
        assert result.target_count is None
        assert not result.unreachable
        assert result.per_image_counts == [800, 1000, 1200]

    def test_unreachable(self):
        result = calibrate_budget(DetectorParams("harris"), SCALES, 5000, count_fn=exponential_count)
        assert result.unreachable
        assert result.sensitivity == 0.0
        assert result.achieved_mean == pytest.approx(1000.0)

    def test_target_equal_to_unlimited_is_reachable(self):
        result = calibrate_budget(DetectorParams("harris"), SCALES, 1000, count_fn=exponential_count)
        assert result.sensitivity == 0.0
        assert not result.unreachable

    def test_threads_match_serial(self):
        serial = calibrate_budget(DetectorParams("harris"), SCALES, 300, count_fn=exponential_count)
        threaded = calibrate_budget(DetectorParams("harris"), SCALES, 300, workers=3, count_fn=exponential_count)
        assert serial.to_dict() == threaded.to_dict()

    def test_iteration_cap(self):
        result = calibrate_budget(
            DetectorParams("harris"), SCALES, 300, max_iterations=2, count_fn=exponential_count
        )
        assert result.evaluations <= 2 + 2 + 64


class TestDetectors:
    def test_harris_on_textures(self):
        images = [smooth_texture(96, 2.0, seed=s) for s in range(3)]
        unlimited = calibrate_budget(DetectorParams("harris"), images, None)
        target = max(1, int(unlimited.achieved_mean // 2))
        result = calibrate_budget(DetectorParams("harris"), images, target)
        assert abs(result.achieved_mean - target) <= max(2.0, 0.1 * target)
        again = [len(detect_keypoints(img, DetectorParams("harris", sensitivity=result.sensitivity)))
                 for img in images]
        assert again == result.per_image_counts

    def test_grid_places_target(self):
        rois = [np.ones((100, 100), dtype=bool)] * 2
        images = [np.zeros((100, 100))] * 2
        result = calibrate_budget(DetectorParams("grid"), images, 100, rois=rois)
        assert result.per_image_counts == [100, 100]
        assert result.sensitivity == 0.0


class TestErrors:
    def test_no_images(self):
        with pytest.raises(ConfigError):
            calibrate_budget(DetectorParams("harris"), [], 100)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            calibrate_budget(DetectorParams("harris"), SCALES, 0, count_fn=exponential_count)
