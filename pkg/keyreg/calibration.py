"""Detector sensitivity calibration against an average keypoint-count target."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .detect import DetectorParams, detect_keypoints
from .errors import ConfigError
from .imagecore import Image, RoiMask

logger = logging.getLogger(__name__)

BUDGET_PRESETS = (100, 500, 1000)
GRID_BUDGETS = (100, 500, 1000, 5000, 40000)

CountFn = Callable[[Image, DetectorParams, Optional[RoiMask]], int]


def _default_count(img: Image, params: DetectorParams, roi: Optional[RoiMask]) -> int:
    return len(detect_keypoints(img, params, roi))


@dataclass
class CalibrationResult:
    """Outcome of a budget calibration.

    ``target_count`` is None for the unlimited setting. ``unreachable`` is set
    when even sensitivity 0 detects fewer keypoints on average than the target.
    """

    kind: str
    target_count: Optional[int]
    sensitivity: float
    per_image_counts: List[int] = field(default_factory=list)
    unreachable: bool = False
    evaluations: int = 0

    @property
    def achieved_mean(self) -> float:
        if not self.per_image_counts:
            return 0.0
        return float(np.mean(self.per_image_counts))

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "target_count": self.target_count,
            "achieved_mean": self.achieved_mean,
            "sensitivity": self.sensitivity,
            "per_image_counts": list(self.per_image_counts),
            "unreachable": self.unreachable,
            "evaluations": self.evaluations,
        }


class _CountCache:
    """Mean keypoint counts per sensitivity, evaluated over all images in order."""

    def __init__(self, params, images, rois, count_fn, workers):
        self.params = params
        self.images = images
        self.rois = rois
        self.count_fn = count_fn
        self.workers = max(1, int(workers))
        self.counts: Dict[float, List[int]] = {}

    def __call__(self, sensitivity: float) -> List[int]:
        if sensitivity not in self.counts:
            p = self.params.with_sensitivity(sensitivity)
            jobs = list(zip(self.images, self.rois))
            if self.workers == 1:
                counts = [self.count_fn(img, p, roi) for img, roi in jobs]
            else:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    counts = list(pool.map(lambda job: self.count_fn(job[0], p, job[1]), jobs))
            self.counts[sensitivity] = [int(c) for c in counts]
            logger.debug(f"{self.params.kind}: sensitivity {sensitivity:.6g} -> mean {np.mean(counts):.1f}")
        return self.counts[sensitivity]


def calibrate_budget(
    detector: DetectorParams,
    images: Sequence[Image],
    target_avg: Optional[int],
    rois: Optional[Sequence[Optional[RoiMask]]] = None,
    max_iterations: int = 40,
    workers: int = 1,
    count_fn: Optional[CountFn] = None,
) -> CalibrationResult:
    """Find the sensitivity whose mean keypoint count is closest to target_avg.

    Starting from the detector's default sensitivity, the upper end of the
    bracket is doubled until the mean count drops to the target or below;
    bisection (at most ``max_iterations`` steps) then narrows the bracket.
    Counts must be non-increasing in sensitivity.

    Args:
        detector: detector parameters; the sensitivity field is the search start
        images: evaluation images (already at working resolution)
        target_avg: mean keypoints per image; None means unlimited (sensitivity 0)
        rois: optional RoI per image, used by the grid baseline
        max_iterations: bisection steps
        workers: threads used to evaluate images at one sensitivity
        count_fn: replaces the detector call, ``(img, params, roi) -> count``

    Returns:
        CalibrationResult; ``unreachable`` is True when sensitivity 0 falls short
    """
    if not images:
        raise ConfigError("Calibration needs at least one image")
    if target_avg is not None and target_avg < 1:
        raise ConfigError("Calibration target must be >= 1")
    rois = list(rois) if rois is not None else [None] * len(images)
    count_fn = count_fn or _default_count

    if detector.kind == "grid":
        # The grid baseline places its target count directly.
        target = target_avg if target_avg is not None else max(GRID_BUDGETS)
        params = DetectorParams(kind="grid", grid_target=target, nms_radius=detector.nms_radius)
        counts = [int(count_fn(img, params, roi)) for img, roi in zip(images, rois)]
        result = CalibrationResult("grid", target_avg, 0.0, counts, evaluations=1)
        result.unreachable = target_avg is not None and result.achieved_mean < target_avg
        logger.info(f"grid: target {target} placed, mean {result.achieved_mean:.1f}")
        return result

    cache = _CountCache(detector, list(images), rois, count_fn, workers)

    def mean_at(s: float) -> float:
        return float(np.mean(cache(s)))

    unlimited = mean_at(0.0)
    if target_avg is None or unlimited <= target_avg:
        unreachable = target_avg is not None and unlimited < target_avg
        if unreachable:
            logger.warning(
                f"{detector.kind}: target {target_avg} unreachable, unlimited mean is {unlimited:.1f}"
            )
        return CalibrationResult(detector.kind, target_avg, 0.0, cache(0.0), unreachable, len(cache.counts))

    lo = 0.0
    hi = detector.sensitivity if detector.sensitivity > 0 else 1e-3
    for _ in range(64):
        if mean_at(hi) <= target_avg:
            break
        lo, hi = hi, hi * 2.0
    else:
        logger.warning(f"{detector.kind}: bracket expansion stopped at sensitivity {hi:.3g}")

    def score(s: float):
        return (abs(mean_at(s) - target_avg), s)

    best = min((lo, hi), key=score)
    for _ in range(max_iterations):
        if mean_at(best) == target_avg:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if mean_at(mid) >= target_avg:
            lo = mid
        else:
            hi = mid
        best = min((best, mid), key=score)

    result = CalibrationResult(detector.kind, target_avg, best, cache(best), False, len(cache.counts))
    logger.info(
        f"{detector.kind}: calibrated sensitivity {best:.6g} for target {target_avg} "
        f"(mean {result.achieved_mean:.1f})"
    )
    return result
