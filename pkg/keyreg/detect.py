"""Classical keypoint detectors, random-grid baseline and non-maximum suppression.

Every detector takes a single-channel float image in [0, 1] and a
:class:`DetectorParams`, and returns keypoints sorted by descending response
(ties by ``(y, x)``) with no two keypoints closer than ``nms_radius``.

For every detector the candidate set and each candidate's response do not
depend on ``sensitivity``; the threshold only drops candidates. Together with
greedy NMS in response order this makes the output for a higher sensitivity a
subset of the output for a lower one, which budget calibration relies on.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyImage, EmptyRoi, ImageTooSmall, NonGrayInput
from .imagecore import Image, Keypoint, RoiMask, to_gray

logger = logging.getLogger(__name__)

DETECTOR_KINDS = ("harris", "fast", "orb", "dog", "censure", "grid")

DEFAULT_SENSITIVITY = {
    "harris": 1e-4,
    "fast": 0.05,
    "orb": 0.05,
    "dog": 0.01,
    "censure": 0.01,
    "grid": 0.0,
}

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)

_BORDER = 3


@dataclass(frozen=True)
class DetectorParams:
    """Detector kind, sensitivity and per-kind extras.

    ``sensitivity`` is in kind-specific units: Harris response for harris,
    intensity difference for fast/orb, |DoG| for dog, |filter response| for
    censure. ``sensitivity = 0`` removes the threshold.
    """

    kind: str = "harris"
    sensitivity: Optional[float] = None
    nms_radius: float = 3.0
    harris_k: float = 0.04
    harris_sigma: float = 1.0
    fast_n: int = 9
    dog_octaves: int = 4
    dog_scales: int = 3
    dog_sigma: float = 1.6
    dog_edge_ratio: float = 10.0
    censure_scales: int = 5
    censure_line_threshold: float = 10.0
    grid_target: int = 500
    max_keypoints: int = 0
    gray_mode: str = "green"

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ConfigError(f"Unknown detector kind '{self.kind}'")
        if self.sensitivity is None:
            object.__setattr__(self, "sensitivity", DEFAULT_SENSITIVITY[self.kind])
        if self.sensitivity < 0:
            raise ConfigError("sensitivity must be >= 0")
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0")
        if not 0.0 < self.harris_k < 0.25:
            raise ConfigError("harris_k must be in (0, 0.25)")
        if not 9 <= self.fast_n <= 12:
            raise ConfigError("fast_n must be in [9, 12]")
        if self.dog_octaves < 1 or self.dog_scales < 1:
            raise ConfigError("dog_octaves and dog_scales must be >= 1")
        if self.censure_scales < 3:
            raise ConfigError("censure_scales must be >= 3")
        if self.grid_target < 1:
            raise ConfigError("grid_target must be >= 1")

    def with_sensitivity(self, sensitivity: float) -> "DetectorParams":
        return replace(self, sensitivity=float(sensitivity))

    def to_dict(self) -> Dict:
        return asdict(self)


def _check_gray(img: Image, min_side: int) -> np.ndarray:
    if img.size == 0:
        raise EmptyImage("Image has no pixels")
    if img.ndim != 2:
        raise NonGrayInput(f"Detector expects a single-channel image, got shape {img.shape}")
    if min(img.shape) < min_side:
        raise ImageTooSmall(f"Image side {min(img.shape)} below minimum {min_side}")
    return img.astype(np.float64, copy=False)


def _sort_key(kp: Keypoint):
    return (-kp.response, kp.y, kp.x)


def _nms_indices(kps: List[Keypoint], radius: float) -> List[int]:
    order = sorted(range(len(kps)), key=lambda i: _sort_key(kps[i]))
    if radius <= 0 or len(order) < 2:
        return order
    pts = np.array([(kps[i].x, kps[i].y) for i in order], dtype=np.float64)
    tree = cKDTree(pts)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for rank, index in enumerate(order):
        if suppressed[rank]:
            continue
        kept.append(index)
        for j in tree.query_ball_point(pts[rank], r=radius):
            suppressed[j] = True
    return kept


def nms(kps: List[Keypoint], radius: float) -> List[Keypoint]:
    """Greedy non-maximum suppression.

    Keypoints are visited in descending response (ties by ``(y, x)``); a
    keypoint survives unless a previously kept one lies within Euclidean
    distance ``<= radius``. Radius 0 only normalises the order.
    """
    return [kps[i] for i in _nms_indices(kps, radius)]


def _finalize_indices(candidates: List[Keypoint], params: DetectorParams) -> List[int]:
    kept = _nms_indices(candidates, params.nms_radius)
    if params.max_keypoints > 0:
        kept = kept[:params.max_keypoints]
    return kept


def _finalize(candidates: List[Keypoint], params: DetectorParams) -> List[Keypoint]:
    return [candidates[i] for i in _finalize_indices(candidates, params)]


def _interior(shape, margin: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if shape[0] > 2 * margin and shape[1] > 2 * margin:
        mask[margin:shape[0] - margin, margin:shape[1] - margin] = True
    return mask


# --- Harris ---------------------------------------------------------------

def harris_response(gray: np.ndarray, k: float = 0.04, sigma: float = 1.0) -> np.ndarray:
    """Harris measure ``det(M) - k trace(M)^2`` of the smoothed structure tensor.

    Gradients are 3x3 Sobel scaled to intensity units per pixel.
    """
    gray = np.asarray(gray, dtype=np.float64)
    ix = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris(img: Image, params: DetectorParams) -> List[Keypoint]:
    """Harris corners: local maxima of the Harris measure with R >= sensitivity."""
    gray = _check_gray(img, 7)
    r = harris_response(gray, params.harris_k, params.harris_sigma)
    peaks = (r == ndimage.maximum_filter(r, size=3, mode="nearest")) & (r > 0) & (r >= params.sensitivity)
    peaks &= _interior(r.shape, _BORDER)
    ys, xs = np.nonzero(peaks)
    return _finalize([Keypoint(float(x), float(y), float(r[y, x])) for y, x in zip(ys, xs)], params)


# --- FAST -----------------------------------------------------------------

def fast_score(gray: np.ndarray, n: int = 9) -> np.ndarray:
    """Largest threshold for which each pixel passes the n-of-16 segment test.

    Border pixels (closer than 3 to the edge) score 0.
    """
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    score = np.zeros((h, w), dtype=np.float64)
    if h <= 6 or w <= 6:
        return score
    center = gray[3:h - 3, 3:w - 3]
    diffs = np.stack([gray[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] - center for dx, dy in FAST_CIRCLE])
    best = np.zeros_like(center)
    for signed in (diffs, -diffs):
        ext = np.concatenate([signed, signed[:n - 1]], axis=0)
        arc_min = ext[0:16]
        for k in range(1, n):
            arc_min = np.minimum(arc_min, ext[k:k + 16])
        best = np.maximum(best, arc_min.max(axis=0))
    score[3:h - 3, 3:w - 3] = best
    return score


def fast(img: Image, params: DetectorParams) -> List[Keypoint]:
    """FAST segment-test corners.

    A pixel is a corner iff at least ``fast_n`` contiguous circle pixels are
    all brighter than ``I(p) + t`` or all darker than ``I(p) - t``.
    """
    gray = _check_gray(img, 7)
    score = fast_score(gray, params.fast_n)
    ys, xs = np.nonzero((score > params.sensitivity) & (score > 0))
    return _finalize([Keypoint(float(x), float(y), float(score[y, x])) for y, x in zip(ys, xs)], params)


def orb_detect(img: Image, params: DetectorParams) -> List[Keypoint]:
    """FAST candidates re-scored and filtered by the Harris measure.

    Only candidates with a positive Harris response are kept; ``max_keypoints``
    (0 = all) caps the count after ranking by Harris response.
    """
    gray = _check_gray(img, 7)
    candidates = fast(gray, replace(params, max_keypoints=0))
    if not candidates:
        return []
    r = harris_response(gray, params.harris_k, params.harris_sigma)
    rescored = []
    for kp in candidates:
        value = float(r[int(kp.y), int(kp.x)])
        if value > 0:
            rescored.append(Keypoint(kp.x, kp.y, value))
    rescored.sort(key=_sort_key)
    if params.max_keypoints > 0:
        rescored = rescored[:params.max_keypoints]
    return rescored


# --- Difference of Gaussians ----------------------------------------------

def _strict_extrema(stack: np.ndarray) -> np.ndarray:
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    nb_max = ndimage.maximum_filter(stack, footprint=footprint, mode="nearest")
    nb_min = ndimage.minimum_filter(stack, footprint=footprint, mode="nearest")
    return (stack > nb_max) | (stack < nb_min)


def dog_pyramid(gray: np.ndarray, octaves: int = 4, scales: int = 3, sigma0: float = 1.6) -> List[np.ndarray]:
    """DoG stacks per octave, each of shape ``(scales + 2, H, W)``.

    Octaves are not subsampled: every Gaussian level is filtered directly from
    the input at full resolution, so the pyramid commutes with integer shifts
    away from the border. The input is assumed to carry a blur of 0.5; level
    ``i`` of octave ``o`` has total blur ``sigma0 * 2 ** (o + i / scales)``.
    """
    gray = np.asarray(gray, dtype=np.float64)
    blurred: Dict[int, np.ndarray] = {}

    def level(index: int) -> np.ndarray:
        if index not in blurred:
            sigma = sigma0 * 2.0 ** (index / scales)
            blurred[index] = ndimage.gaussian_filter(gray, math.sqrt(max(sigma ** 2 - 0.25, 1e-6)), mode="nearest")
        return blurred[index]

    pyramid = []
    for octave in range(octaves):
        first = octave * scales
        g = np.stack([level(first + i) for i in range(scales + 3)])
        pyramid.append(g[1:] - g[:-1])
    return pyramid


def _refine(dog: np.ndarray, s: int, y: int, x: int, max_steps: int = 5):
    """Quadratic fit around a DoG extremum.

    Returns:
        (s, y, x, offset, value, hessian_xy) or None when the fit does not
        converge inside the stack
    """
    n_s, h, w = dog.shape
    for _ in range(max_steps):
        if not (1 <= s < n_s - 1 and 1 <= y < h - 1 and 1 <= x < w - 1):
            return None
        c = dog[s, y, x]
        grad = 0.5 * np.array([
            dog[s, y, x + 1] - dog[s, y, x - 1],
            dog[s, y + 1, x] - dog[s, y - 1, x],
            dog[s + 1, y, x] - dog[s - 1, y, x],
        ])
        dxx = dog[s, y, x + 1] - 2 * c + dog[s, y, x - 1]
        dyy = dog[s, y + 1, x] - 2 * c + dog[s, y - 1, x]
        dss = dog[s + 1, y, x] - 2 * c + dog[s - 1, y, x]
        dxy = 0.25 * (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1])
        dxs = 0.25 * (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1] - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1])
        dys = 0.25 * (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x] - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) <= 0.5):
            value = c + 0.5 * float(grad @ offset)
            return s, y, x, offset, value, (dxx, dyy, dxy)
        x += int(np.round(offset[0]))
        y += int(np.round(offset[1]))
        s += int(np.round(offset[2]))
    return None


def _dog_candidates(gray: np.ndarray, params: DetectorParams) -> List[Keypoint]:
    pyramid = dog_pyramid(gray, params.dog_octaves, params.dog_scales, params.dog_sigma)
    r = params.dog_edge_ratio
    edge_limit = (r + 1.0) ** 2 / r
    candidates = []
    for dog in pyramid:
        extrema = _strict_extrema(dog)
        extrema[0] = extrema[-1] = False
        border = np.zeros(dog.shape[1:], dtype=bool)
        border |= ~_interior(dog.shape[1:], 1)
        extrema[:, border] = False
        for s, y, x in zip(*np.nonzero(extrema)):
            fit = _refine(dog, int(s), int(y), int(x))
            if fit is None:
                continue
            _, fy, fx, offset, value, (dxx, dyy, dxy) = fit
            det = dxx * dyy - dxy * dxy
            if det <= 0 or (dxx + dyy) ** 2 / det >= edge_limit:
                continue
            px = fx + offset[0]
            py = fy + offset[1]
            if 0 <= px < gray.shape[1] and 0 <= py < gray.shape[0]:
                candidates.append(Keypoint(float(px), float(py), abs(float(value))))
    return candidates


def dog_detect(img: Image, params: DetectorParams) -> List[Keypoint]:
    """SIFT-style scale-space extrema of the difference of Gaussians.

    Keypoints are 3x3x3 DoG extrema refined by a quadratic fit, with
    ``|DoG| >= sensitivity`` and principal-curvature ratio below
    ``dog_edge_ratio``; locations are reported in base-image pixels.
    """
    gray = _check_gray(img, 32)
    candidates = [kp for kp in _dog_candidates(gray, params)
                  if kp.response >= params.sensitivity and kp.response > 0]
    return _finalize(candidates, params)


# --- CenSurE (STAR) -------------------------------------------------------

def censure_sizes(n_scales: int = 5) -> List[int]:
    """Inner half-sizes of the star filters: geometric with ratio sqrt(2) from 2."""
    return [int(round(2.0 * math.sqrt(2.0) ** i)) for i in range(n_scales)]


def _star_half_widths(a: int) -> Dict[int, int]:
    """Row half-widths of an upright square (half-size a) unioned with a 45 degree one."""
    b = int(round(a * math.sqrt(2.0)))
    widths = {}
    for dy in range(-b, b + 1):
        diamond = b - abs(dy)
        square = a if abs(dy) <= a else -1
        widths[dy] = max(diamond, square)
    return widths


def _star_sum(row_prefix: np.ndarray, pad: int, shape, a: int) -> Tuple[np.ndarray, int]:
    """Sum of the star filter of half-size a at every pixel, via row prefix sums."""
    h, w = shape
    total = np.zeros((h, w), dtype=np.float64)
    area = 0
    for dy, hw in _star_half_widths(a).items():
        rows = slice(pad + dy, pad + dy + h)
        right = row_prefix[rows, pad + hw + 1:pad + hw + 1 + w]
        left = row_prefix[rows, pad - hw:pad - hw + w]
        total += right - left
        area += 2 * hw + 1
    return total, area


def censure_responses(gray: np.ndarray, n_scales: int = 5) -> Tuple[List[int], np.ndarray]:
    """Bi-level star filter responses at every scale.

    The response at scale ``a`` is the mean over the inner star of half-size
    ``a`` minus the mean over the ring up to the outer star of half-size
    ``2a``. Pixels whose outer star leaves the image get response 0.

    Returns:
        (inner half-sizes, array of shape (n_scales, H, W))
    """
    gray = np.asarray(gray, dtype=np.float64)
    sizes = censure_sizes(n_scales)
    outer_reach = int(round(2 * sizes[-1] * math.sqrt(2.0)))
    pad = outer_reach + 1
    padded = np.pad(gray, pad, mode="edge")
    row_prefix = np.concatenate([np.zeros((padded.shape[0], 1)), np.cumsum(padded, axis=1)], axis=1)
    # Shift by one so that row_prefix[:, j] is the sum of columns < j of padded.
    row_prefix = np.concatenate([row_prefix[:, :1], row_prefix], axis=1)[:, 1:]
    stack = np.zeros((len(sizes),) + gray.shape, dtype=np.float64)
    for i, a in enumerate(sizes):
        inner, inner_area = _star_sum(row_prefix, pad, gray.shape, a)
        outer, outer_area = _star_sum(row_prefix, pad, gray.shape, 2 * a)
        resp = inner / inner_area - (outer - inner) / (outer_area - inner_area)
        reach = int(round(2 * a * math.sqrt(2.0)))
        resp[~_interior(gray.shape, reach)] = 0.0
        stack[i] = resp
    return sizes, stack


def _line_ratio(resp: np.ndarray, scale: int) -> np.ndarray:
    gy, gx = np.gradient(resp)
    sigma = max(1.0, float(scale))
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    det = sxx * syy - sxy * sxy
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(det > 0, (sxx + syy) ** 2 / det, np.inf)
    return ratio


def censure_star_with_scales(img: Image, params: DetectorParams) -> List[Tuple[Keypoint, int]]:
    """CenSurE-STAR keypoints paired with the index of their filter scale."""
    gray = _check_gray(img, 32)
    sizes, stack = censure_responses(gray, params.censure_scales)
    magnitude = np.abs(stack)
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    nb_max = ndimage.maximum_filter(magnitude, footprint=footprint, mode="constant", cval=0.0)
    peaks = (magnitude > nb_max) & (magnitude > 0) & (magnitude >= params.sensitivity)
    candidates = []
    scales = []
    for i, a in enumerate(sizes):
        layer = peaks[i]
        if not layer.any():
            continue
        layer &= _line_ratio(stack[i], a) <= params.censure_line_threshold
        for y, x in zip(*np.nonzero(layer)):
            candidates.append(Keypoint(float(x), float(y), float(magnitude[i, y, x])))
            scales.append(i)
    return [(candidates[k], scales[k]) for k in _finalize_indices(candidates, params)]


def censure_star(img: Image, params: DetectorParams) -> List[Keypoint]:
    """Center-surround extrema of star-shaped bi-level filters.

    Scale-space 3x3x3 maxima of the response magnitude, so bright and dark
    blobs are both found; line-like responses are rejected with a Harris-like
    ratio test on the response map.
    """
    return [kp for kp, _ in censure_star_with_scales(img, params)]


# --- Random grid baseline -------------------------------------------------

def _lattice(size: int, spacing: float) -> np.ndarray:
    count = int(math.floor((size - spacing / 2.0) / spacing)) + 1
    coords = np.floor(spacing / 2.0 + np.arange(max(count, 0)) * spacing).astype(int)
    return coords[(coords >= 0) & (coords < size)]


def grid_keypoints(roi: RoiMask, target: int) -> Tuple[List[Keypoint], bool]:
    """Equispaced lattice inside the RoI with a count as close to target as possible.

    Args:
        roi: boolean RoI mask
        target: desired number of keypoints (>= 1)

    Returns:
        (keypoints in (y, x) scan order, saturated) where saturated is True
        when target exceeds the RoI pixel count and every RoI pixel is returned
    """
    if target < 1:
        raise ConfigError("grid target must be >= 1")
    roi = np.asarray(roi, dtype=bool)
    n_roi = int(roi.sum())
    if n_roi == 0:
        raise EmptyRoi("RoI has no pixels")
    if target > n_roi:
        logger.warning(f"Grid target {target} exceeds RoI size {n_roi}; returning every RoI pixel")
        ys, xs = np.nonzero(roi)
        return [Keypoint(float(x), float(y), 1.0) for y, x in zip(ys, xs)], True

    h, w = roi.shape
    s0 = math.sqrt(n_roi / target)
    spacings = [s0] + [s for s in s0 * np.linspace(0.7, 1.3, 121) if s != s0]
    best = None
    for s in spacings:
        if s < 1.0:
            continue
        xs, ys = _lattice(w, s), _lattice(h, s)
        count = int(roi[np.ix_(ys, xs)].sum())
        key = (abs(count - target), abs(s - s0))
        if best is None or key < best[0]:
            best = (key, xs, ys)
    _, xs, ys = best
    inside = roi[np.ix_(ys, xs)]
    kps = [Keypoint(float(xs[j]), float(ys[i]), 1.0) for i, j in zip(*np.nonzero(inside))]
    return kps, False


# --- Dispatch -------------------------------------------------------------

_DETECTORS: Dict[str, Callable[[Image, DetectorParams], List[Keypoint]]] = {
    "harris": harris,
    "fast": fast,
    "orb": orb_detect,
    "dog": dog_detect,
    "censure": censure_star,
}


def detect_keypoints(img: Image, params: DetectorParams, roi: Optional[RoiMask] = None) -> List[Keypoint]:
    """Run the detector named by ``params.kind`` on an image.

    Colour images are reduced with :func:`keyreg.imagecore.to_gray` using
    ``params.gray_mode``. The grid baseline uses the RoI (full frame when
    none is given) and ``params.grid_target``.
    """
    if params.kind == "grid":
        if roi is None:
            roi = np.ones(img.shape[:2], dtype=bool)
        kps, _ = grid_keypoints(roi, params.grid_target)
        return kps
    gray = to_gray(img, params.gray_mode) if img.ndim == 3 else img
    return _DETECTORS[params.kind](gray, params)
