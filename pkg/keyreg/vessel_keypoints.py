"""Keypoints derived from vessel segmentation masks and logit maps."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from skimage import feature, morphology

from .detect import DetectorParams, detect_keypoints
from .errors import BadThresholds, ConfigError, EmptyMask
from .imagecore import Keypoint, RoiMask

logger = logging.getLogger(__name__)

VESSEL_MODES = ("all", "skeleton", "canny", "skeleton+canny", "subsample")
SUBSAMPLE_KERNELS = (3, 5, 7, 9, 13, 17)

# Canny defaults: absolute thresholds for binary masks, gradient quantiles for logits.
MASK_CANNY = {"sigma": 1.0, "lo": 0.1, "hi": 0.2, "use_quantiles": False}
LOGIT_CANNY = {"sigma": 1.0, "lo": 0.7, "hi": 0.9, "use_quantiles": True}


@dataclass(frozen=True, eq=False)
class VesselMask:
    """Binary vessel mask with its provenance ("binary_mask" or "thresholded_logits")."""

    mask: np.ndarray
    provenance: str = "binary_mask"

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @classmethod
    def from_logits(cls, logits: np.ndarray, threshold: float = 0.5) -> "VesselMask":
        return cls(binarize_logits(logits, threshold), "thresholded_logits")


MaskLike = Union[VesselMask, np.ndarray]


def _as_mask(mask: MaskLike) -> np.ndarray:
    arr = mask.mask if isinstance(mask, VesselMask) else np.asarray(mask, dtype=bool)
    if not arr.any():
        raise EmptyMask("Vessel mask has no foreground pixels")
    return arr


def binarize_logits(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Vessel mask from logits: ``sigmoid(logits) > threshold``."""
    return expit(np.asarray(logits, dtype=np.float64)) > threshold


def normalize_logits(logits: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1].

    Maps already inside [0, 1] are returned unchanged; constant maps outside
    it become all zeros.
    """
    arr = np.asarray(logits, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if lo >= 0.0 and hi <= 1.0:
        return arr
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def mask_points(mask: MaskLike) -> List[Keypoint]:
    """One keypoint (response 1) per foreground pixel, in (y, x) scan order."""
    ys, xs = np.nonzero(_as_mask(mask))
    return [Keypoint(float(x), float(y), 1.0) for y, x in zip(ys, xs)]


def skeletonize(mask: MaskLike) -> np.ndarray:
    """Zhang-Suen thinning to a unit-width, 8-connected skeleton."""
    return morphology.skeletonize(_as_mask(mask)).astype(bool)


def canny_edges(
    fmap: np.ndarray,
    sigma: float = 1.0,
    lo: float = 0.1,
    hi: float = 0.2,
    use_quantiles: bool = False,
) -> np.ndarray:
    """Canny edge mask of a single-channel map.

    Args:
        fmap: (H, W) float map (binary mask or normalised logits)
        sigma: Gaussian smoothing
        lo: lower hysteresis threshold
        hi: upper hysteresis threshold
        use_quantiles: read lo/hi as quantiles of the gradient magnitude

    Returns:
        Boolean edge mask
    """
    if lo >= hi:
        raise BadThresholds(f"Hysteresis thresholds must satisfy lo < hi, got {lo} >= {hi}")
    arr = np.asarray(fmap, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"canny_edges expects a single-channel map, got shape {arr.shape}")
    if arr.max() == arr.min():
        return np.zeros(arr.shape, dtype=bool)
    return feature.canny(
        arr, sigma=sigma, low_threshold=lo, high_threshold=hi,
        use_quantiles=use_quantiles, mode="nearest",
    )


def subsample_skeleton(points: List[Keypoint], kernel: int) -> List[Keypoint]:
    """Thin a point set by scanning in (y, x) order.

    Each point not yet deleted is kept and deletes every later point within
    Chebyshev distance ``(kernel - 1) / 2``.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"Subsampling kernel must be odd and >= 1, got {kernel}")
    ordered = sorted(points, key=lambda kp: (kp.y, kp.x))
    half = (kernel - 1) // 2
    if half == 0 or len(ordered) < 2:
        return ordered
    pts = np.array([(kp.x, kp.y) for kp in ordered], dtype=np.float64)
    tree = cKDTree(pts)
    deleted = np.zeros(len(ordered), dtype=bool)
    kept = []
    for i, kp in enumerate(ordered):
        if deleted[i]:
            continue
        kept.append(kp)
        for j in tree.query_ball_point(pts[i], r=half, p=np.inf):
            deleted[j] = True
    return kept


def parse_vessel_mode(mode: str):
    """Split ``subsample:K`` into ("subsample", K); other modes get K = None."""
    name, _, arg = mode.partition(":")
    if name not in VESSEL_MODES:
        raise ConfigError(f"Unknown vessel keypoint mode '{mode}'")
    if name == "subsample":
        try:
            return name, int(arg)
        except ValueError as e:
            raise ConfigError(f"subsample mode needs an odd kernel, got '{mode}'") from e
    if arg:
        raise ConfigError(f"Vessel mode '{name}' takes no argument")
    return name, None


def vessel_keypoints(mask: MaskLike, mode: str = "all", roi: Optional[RoiMask] = None) -> List[Keypoint]:
    """Derive keypoints from a vessel mask.

    Args:
        mask: vessel mask
        mode: "all", "skeleton", "canny", "skeleton+canny" or "subsample:K"
        roi: optional RoI; points outside it are dropped

    Returns:
        Keypoints in (y, x) scan order
    """
    name, kernel = parse_vessel_mode(mode)
    arr = _as_mask(mask)
    if roi is not None:
        arr = arr & np.asarray(roi, dtype=bool)
    if name == "all":
        derived = arr
    elif name == "skeleton":
        derived = skeletonize(arr)
    elif name == "canny":
        derived = canny_edges(arr.astype(np.float64), **_canny_args(MASK_CANNY))
    elif name == "skeleton+canny":
        derived = skeletonize(arr) | canny_edges(arr.astype(np.float64), **_canny_args(MASK_CANNY))
    else:
        return subsample_skeleton(mask_points(skeletonize(arr)), kernel)
    if not derived.any():
        return []
    return mask_points(derived)


def _canny_args(defaults):
    return {k: defaults[k] for k in ("sigma", "lo", "hi", "use_quantiles")}


def canny_on_logits(logits: np.ndarray, **overrides) -> np.ndarray:
    """Canny over min-max normalised logits with quantile thresholds."""
    args = {**_canny_args(LOGIT_CANNY), **overrides}
    return canny_edges(normalize_logits(logits), **args)


def detect_on_logits(detector: DetectorParams, logits: np.ndarray, roi: Optional[RoiMask] = None) -> List[Keypoint]:
    """Run a classical detector over a normalised logit map."""
    if detector.kind == "grid":
        raise ConfigError("The grid baseline does not read image content; use it without logits")
    arr = np.asarray(logits)
    if arr.ndim != 2:
        raise ConfigError(f"Logit map must be single-channel, got shape {arr.shape}")
    return detect_keypoints(normalize_logits(arr), detector, roi)
