"""Descriptor matching, homography estimation and single-pair registration.

Homographies returned by registration map moving-image pixels onto
fixed-image pixels at native resolution.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .descriptor import DescriptorSource
from .detect import DetectorParams, detect_keypoints
from .errors import (
    ConfigError,
    DegenerateConfiguration,
    EmptyDescriptorSet,
    InsufficientMatches,
    KeyregError,
    NoConsensus,
    SingularTransform,
)
from .imagecore import (
    Homography,
    Image,
    Keypoint,
    RoiMask,
    derive_roi,
    invert_homography,
    keypoints_to_array,
    resize_image,
    resize_mask,
    to_gray,
    warp_image,
)

logger = logging.getLogger(__name__)

Size = Tuple[int, int]

STATUS_OK = "ok"
STATUS_INSUFFICIENT = "insufficient_matches"
STATUS_NO_CONSENSUS = "no_consensus"
STATUS_DEGENERATE = "degenerate"
STATUS_ERROR = "error"


class Match(NamedTuple):
    index_fixed: int
    index_moving: int
    distance: float


@dataclass(frozen=True)
class RansacConfig:
    """RANSAC settings; the inlier threshold is in pixels of the estimation frame."""

    inlier_threshold: float = 3.0
    max_iterations: int = 5000
    confidence: float = 0.995
    min_inliers: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ConfigError("inlier_threshold must be > 0")
        if not 0 < self.confidence < 1:
            raise ConfigError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.min_inliers < 4:
            raise ConfigError("min_inliers must be >= 4")


@dataclass
class RegistrationResult:
    """Outcome of registering one pair (or of one RANSAC run)."""

    homography: Optional[Homography]
    inliers: List[Match] = field(default_factory=list)
    iterations: int = 0
    status: str = STATUS_OK
    residuals: List[float] = field(default_factory=list)
    message: str = ""
    num_keypoints: Tuple[int, int] = (0, 0)
    num_matches: int = 0

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> Dict:
        return {
            "status": self.status,
            "homography": self.homography.to_list() if self.homography is not None else None,
            "inlier_count": len(self.inliers),
            "residuals": [float(r) for r in self.residuals],
            "iterations": self.iterations,
            "num_keypoints": list(self.num_keypoints),
            "num_matches": self.num_matches,
            "message": self.message,
        }


# --- Matching -------------------------------------------------------------

def match_descriptors(a: np.ndarray, b: np.ndarray) -> List[Match]:
    """Mutual nearest neighbours under L2, sorted by ascending distance.

    Ties in the nearest-neighbour search go to the smaller index.

    Args:
        a: (Na, D) fixed-image descriptors
        b: (Nb, D) moving-image descriptors
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptyDescriptorSet(f"Cannot match {len(a)} against {len(b)} descriptors")
    dist = cdist(a, b)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    matches = [Match(int(i), int(j), float(dist[i, j])) for i, j in enumerate(nn_ab) if nn_ba[j] == i]
    matches.sort(key=lambda m: (m.distance, m.index_fixed, m.index_moving))
    return matches


# --- DLT ------------------------------------------------------------------

def _normalization(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    if mean_dist <= 0:
        raise DegenerateConfiguration("All points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def has_collinear_triple(pts: np.ndarray, rel_tol: float = 1e-6) -> bool:
    """True when some three points span a triangle of area < rel_tol * span^2."""
    pts = np.asarray(pts, dtype=np.float64)
    span = float(np.max(np.ptp(pts, axis=0))) if len(pts) else 0.0
    if span == 0.0:
        return True
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if 0.5 * abs(u[0] * v[1] - u[1] * v[0]) < rel_tol * span * span:
                    return True
    return False


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Hartley-normalised DLT homography mapping src onto dst.

    Args:
        src: (N, 2) source points, N >= 4
        dst: (N, 2) destination points

    Raises:
        DegenerateConfiguration: fewer than 4 points, a collinear minimal set,
            or a rank-deficient system
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegenerateConfiguration(f"DLT needs >= 4 correspondences, got {n}")
    if n == 4 and (has_collinear_triple(src) or has_collinear_triple(dst)):
        raise DegenerateConfiguration("Three points of the minimal set are collinear")

    t_src = _normalization(src)
    t_dst = _normalization(dst)
    s = src @ t_src[:2, :2].T + t_src[:2, 2]
    d = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -d[:, :1] * s
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -d[:, 1:2] * s
    a[1::2, 8] = -d[:, 1]

    _, sv, vt = np.linalg.svd(a)
    if sv[7] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_norm @ t_src
    try:
        return Homography(m)
    except SingularTransform as e:
        raise DegenerateConfiguration(str(e)) from e


# --- RANSAC ---------------------------------------------------------------

def _project(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homog = pts @ m[:, :2].T + m[:, 2]
    w = homog[:, 2]
    out = np.full((len(pts), 2), np.inf)
    ok = np.abs(w) > 1e-12
    out[ok] = homog[ok, :2] / w[ok, None]
    return out


def symmetric_transfer_error(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Mean of forward ``|H src - dst|`` and backward ``|H^-1 dst - src|`` distances.

    Points mapped to infinity get an infinite error.
    """
    inv = invert_homography(h)
    fwd = np.linalg.norm(_project(h.matrix, src) - dst, axis=1)
    bwd = np.linalg.norm(_project(inv.matrix, dst) - src, axis=1)
    err = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(err), err, np.inf)


def adaptive_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    """Iterations needed to draw one all-inlier 4-sample with the given confidence."""
    if inlier_ratio <= 0:
        return cap
    p_good = inlier_ratio ** 4
    if p_good >= 1.0:
        return 1
    needed = math.log(1.0 - confidence) / math.log(1.0 - p_good)
    return min(cap, max(1, int(math.ceil(needed))))


def _ransac_points(src: np.ndarray, dst: np.ndarray, cfg: RansacConfig) -> Tuple[Homography, np.ndarray, np.ndarray, int]:
    n = len(src)
    if n < 4:
        raise InsufficientMatches(f"RANSAC needs >= 4 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_key = None
    best_model = None
    iterations = 0
    needed = cfg.max_iterations
    draws = 0
    max_draws = 20 * cfg.max_iterations

    while iterations < needed and draws < max_draws:
        draws += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            model = dlt_homography(src[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        iterations += 1
        try:
            err = symmetric_transfer_error(model, src, dst)
        except SingularTransform:
            continue
        inl = err < cfg.inlier_threshold
        count = int(inl.sum())
        if count == 0:
            continue
        key = (count, -float(err[inl].mean()))
        if best_key is None or key > best_key:
            best_key = key
            best_model = model
            needed = adaptive_iterations(count / n, cfg.confidence, cfg.max_iterations)

    if best_model is None:
        raise NoConsensus(f"No valid model after {iterations} iterations")
    err = symmetric_transfer_error(best_model, src, dst)
    inliers = err < cfg.inlier_threshold

    if inliers.sum() >= 4:
        try:
            refit = dlt_homography(src[inliers], dst[inliers])
            refit_err = symmetric_transfer_error(refit, src, dst)
            refit_inl = refit_err < cfg.inlier_threshold
            if refit_inl.sum() >= inliers.sum():
                best_model, err, inliers = refit, refit_err, refit_inl
        except (DegenerateConfiguration, SingularTransform):
            pass

    if inliers.sum() < cfg.min_inliers:
        raise NoConsensus(f"Best model has {int(inliers.sum())} inliers, {cfg.min_inliers} required")
    return best_model, inliers, err, iterations


def ransac_homography(
    matches: Sequence[Match],
    kps_fixed: Sequence[Keypoint],
    kps_moving: Sequence[Keypoint],
    cfg: RansacConfig,
) -> RegistrationResult:
    """Robust moving -> fixed homography from matched keypoints.

    Minimal samples are four matches; degenerate samples are redrawn and do
    not count as iterations. The best model maximises the inlier count (ties
    go to the lower mean inlier error) and is refit on its inliers.

    Raises:
        InsufficientMatches: fewer than 4 matches
        NoConsensus: fewer than ``cfg.min_inliers`` inliers
    """
    if len(matches) < 4:
        raise InsufficientMatches(f"RANSAC needs >= 4 matches, got {len(matches)}")
    fixed = keypoints_to_array(kps_fixed)
    moving = keypoints_to_array(kps_moving)
    src = moving[[m.index_moving for m in matches]]
    dst = fixed[[m.index_fixed for m in matches]]
    model, inliers, err, iterations = _ransac_points(src, dst, cfg)
    return RegistrationResult(
        homography=model,
        inliers=[m for m, keep in zip(matches, inliers) if keep],
        iterations=iterations,
        status=STATUS_OK,
        residuals=[float(e) for e in err[inliers]],
        num_keypoints=(len(kps_fixed), len(kps_moving)),
        num_matches=len(matches),
    )


# --- Resolution changes ---------------------------------------------------

def scale_keypoints(kps: Sequence[Keypoint], from_size: Size, to_size: Size) -> List[Keypoint]:
    """Rescale keypoints between image sizes given as (width, height)."""
    if min(from_size) <= 0 or min(to_size) <= 0:
        raise ConfigError("Sizes must be positive")
    sx = to_size[0] / from_size[0]
    sy = to_size[1] / from_size[1]
    return [Keypoint(kp.x * sx, kp.y * sy, kp.response) for kp in kps]


def scale_homography(h: Homography, from_size: Size, to_size: Size, moving_from: Optional[Size] = None,
                     moving_to: Optional[Size] = None) -> Homography:
    """Express a moving -> fixed homography in another resolution: ``S_f H S_m^-1``.

    When the moving sizes are omitted both images share the fixed scaling.
    """
    moving_from = moving_from or from_size
    moving_to = moving_to or to_size
    s_f = np.diag([to_size[0] / from_size[0], to_size[1] / from_size[1], 1.0])
    s_m_inv = np.diag([moving_from[0] / moving_to[0], moving_from[1] / moving_to[1], 1.0])
    return Homography(s_f @ h.matrix @ s_m_inv)


def estimate_at_working_resolution(
    matches: Sequence[Match],
    kps_fixed: Sequence[Keypoint],
    kps_moving: Sequence[Keypoint],
    working_size: Size,
    fixed_native: Size,
    moving_native: Size,
    cfg: RansacConfig,
) -> RegistrationResult:
    """RANSAC at working resolution, then rescale the homography to native pixels.

    The inlier threshold is scaled from native to working pixels.
    """
    scale = working_size[0] / fixed_native[0]
    work_cfg = RansacConfig(
        cfg.inlier_threshold * scale, cfg.max_iterations, cfg.confidence, cfg.min_inliers, cfg.seed
    )
    result = ransac_homography(matches, kps_fixed, kps_moving, work_cfg)
    result.homography = scale_homography(result.homography, working_size, fixed_native,
                                         working_size, moving_native)
    return result


# --- Pair registration ----------------------------------------------------

@dataclass(frozen=True)
class RegisterConfig:
    """Settings of :func:`register_pair`."""

    working_size: int = 565
    ransac: RansacConfig = field(default_factory=RansacConfig)
    roi_margin: int = 4
    estimate_at_working: bool = False

    def __post_init__(self):
        if self.working_size < 8:
            raise ConfigError("working_size must be >= 8")


KeypointProvider = Callable[[Image, Optional[RoiMask]], List[Keypoint]]
Detector = Union[DetectorParams, KeypointProvider]


def _status_for(error: Exception) -> str:
    if isinstance(error, (InsufficientMatches, EmptyDescriptorSet)):
        return STATUS_INSUFFICIENT
    if isinstance(error, NoConsensus):
        return STATUS_NO_CONSENSUS
    if isinstance(error, (DegenerateConfiguration, SingularTransform)):
        return STATUS_DEGENERATE
    return STATUS_ERROR


def filter_to_roi(kps: Sequence[Keypoint], roi: Optional[RoiMask]) -> List[Keypoint]:
    """Keypoints whose rounded position lies inside the RoI."""
    if roi is None:
        return list(kps)
    h, w = roi.shape
    kept = []
    for kp in kps:
        x, y = int(round(kp.x)), int(round(kp.y))
        if 0 <= x < w and 0 <= y < h and roi[y, x]:
            kept.append(kp)
    return kept


def working_roi(img: Image, roi: Optional[RoiMask], size: int, margin: int) -> RoiMask:
    """RoI at working resolution, eroded by margin pixels."""
    if roi is None:
        roi = derive_roi(img)
    roi = resize_mask(roi, (size, size))
    if margin > 0 and roi.any():
        eroded = ndimage.binary_erosion(roi, iterations=margin)
        if eroded.any():
            roi = eroded
    return roi


def register_pair(
    fixed: Image,
    moving: Image,
    detector: Optional[Detector],
    source: DescriptorSource,
    cfg: Optional[RegisterConfig] = None,
    fixed_roi: Optional[RoiMask] = None,
    moving_roi: Optional[RoiMask] = None,
    keypoints: Optional[Tuple[List[Keypoint], List[Keypoint]]] = None,
) -> RegistrationResult:
    """Register a moving image onto a fixed image.

    Both images are resized to the working resolution for detection and
    description; matched keypoints are scaled back to native pixels and the
    homography is estimated there (or at working resolution and rescaled when
    ``cfg.estimate_at_working`` is set).

    Args:
        fixed: fixed (reference) image at native resolution
        moving: moving image at native resolution
        detector: DetectorParams or a ``(image, roi) -> keypoints`` callable;
            may be None when keypoints are given
        source: descriptor source
        cfg: registration settings
        fixed_roi: optional native RoI of the fixed image (derived otherwise)
        moving_roi: optional native RoI of the moving image
        keypoints: optional precomputed (fixed, moving) keypoints at working resolution

    Returns:
        RegistrationResult; failures are reported through ``status``
    """
    cfg = cfg or RegisterConfig()
    ws = cfg.working_size
    work = (ws, ws)
    fixed_size = (fixed.shape[1], fixed.shape[0])
    moving_size = (moving.shape[1], moving.shape[0])
    stage = "resize"
    kps_f: List[Keypoint] = []
    kps_m: List[Keypoint] = []
    try:
        fixed_w = resize_image(fixed, work)
        moving_w = resize_image(moving, work)
        roi_f = working_roi(fixed, fixed_roi, ws, cfg.roi_margin)
        roi_m = working_roi(moving, moving_roi, ws, cfg.roi_margin)

        stage = "detect"
        if keypoints is not None:
            kps_f, kps_m = keypoints
        elif detector is None:
            raise ConfigError("register_pair needs a detector or precomputed keypoints")
        elif isinstance(detector, DetectorParams):
            kps_f = detect_keypoints(fixed_w, detector, roi_f)
            kps_m = detect_keypoints(moving_w, detector, roi_m)
        else:
            kps_f = detector(fixed_w, roi_f)
            kps_m = detector(moving_w, roi_m)
        kps_f = filter_to_roi(kps_f, roi_f)
        kps_m = filter_to_roi(kps_m, roi_m)

        stage = "describe"
        kps_f, desc_f = source.describe_keypoints(fixed_w, kps_f)
        kps_m, desc_m = source.describe_keypoints(moving_w, kps_m)

        stage = "match"
        matches = match_descriptors(desc_f, desc_m)

        stage = "estimate"
        if cfg.estimate_at_working:
            result = estimate_at_working_resolution(matches, kps_f, kps_m, work, fixed_size, moving_size, cfg.ransac)
        else:
            native_f = scale_keypoints(kps_f, work, fixed_size)
            native_m = scale_keypoints(kps_m, work, moving_size)
            result = ransac_homography(matches, native_f, native_m, cfg.ransac)
        result.num_keypoints = (len(kps_f), len(kps_m))
        result.num_matches = len(matches)
        return result
    except KeyregError as e:
        status = _status_for(e)
        logger.debug(f"Registration failed at {stage}: {e}")
        return RegistrationResult(
            homography=None, status=status, message=f"{stage}: {e}", num_keypoints=(len(kps_f), len(kps_m))
        )


def render_overlay(fixed: Image, moving: Image, h: Homography) -> Image:
    """Red/green overlay of the fixed image and the moving image warped onto it."""
    fixed_gray = to_gray(fixed).astype(np.float64)
    moving_gray = to_gray(moving).astype(np.float64)
    warped = warp_image(moving_gray, h, "bilinear", output_shape=fixed_gray.shape)
    return np.stack([fixed_gray, warped, np.zeros_like(fixed_gray)], axis=-1).clip(0.0, 1.0)
