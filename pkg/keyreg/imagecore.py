"""Image, mask and geometry primitives shared by every keyreg module.

Images are numpy arrays: ``(H, W)`` for single-channel data (gray images,
logit maps) and ``(H, W, 3)`` for colour. Image values live in [0, 1];
logit maps are unbounded. RoI and vessel masks are boolean ``(H, W)`` arrays.

Pixel coordinates are ``(x, y)`` with x the column and y the row; integer
coordinates sit on pixel centres, the top-left pixel centre is ``(0, 0)``.
All geometry is carried out in float64.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage import color

from .errors import ChannelMismatch, DegeneratePoint, SingularTransform

logger = logging.getLogger(__name__)

Image = np.ndarray
RoiMask = np.ndarray
Point = Tuple[float, float]

_W_EPS = 1e-12
_DET_EPS = 1e-12
_AFFINE_DET_EPS = 1e-9


class Keypoint(NamedTuple):
    """Subpixel keypoint with a detector response (higher is stronger)."""

    x: float
    y: float
    response: float = 1.0


def keypoints_to_array(kps: Sequence[Keypoint]) -> np.ndarray:
    """Stack keypoint locations into an ``(N, 2)`` float64 array of (x, y)."""
    if len(kps) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([(kp.x, kp.y) for kp in kps], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map in pixel coordinates.

    The stored matrix is always normalised so that entry (2, 2) equals 1.
    Matrices whose (2, 2) entry is structurally zero are rejected.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise SingularTransform(f"Homography needs a finite 3x3 matrix, got shape {m.shape}")
        if abs(m[2, 2]) <= _W_EPS:
            raise SingularTransform("Homography with zero (2, 2) entry cannot be normalised")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise SingularTransform(f"Homography is singular (det={np.linalg.det(m):.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: float) -> "Homography":
        return cls(np.diag([sx, sy, 1.0]))

    def to_list(self) -> list:
        """Row-major nested list, for JSON."""
        return self.matrix.tolist()


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """2x3 affine map in pixel coordinates."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3)[:2])

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3) or not np.all(np.isfinite(m)):
            raise SingularTransform(f"AffineTransform needs a finite 2x3 matrix, got shape {m.shape}")
        if abs(np.linalg.det(m[:, :2])) <= _AFFINE_DET_EPS:
            raise SingularTransform("Affine linear block is singular")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3)[:2])

    def to_homography(self) -> Homography:
        return Homography(np.vstack([self.matrix, [0.0, 0.0, 1.0]]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an ``(N, 2)`` array of points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]


Transform = Union[AffineTransform, Homography]


def apply_homography(h: Homography, p: Point) -> Point:
    """Map a single point through a homography.

    Args:
        h: Homography
        p: (x, y) point

    Returns:
        (x'/w, y'/w) of the projective image of p

    Raises:
        DegeneratePoint: if the homogeneous coordinate w is (near) zero
    """
    x, y = float(p[0]), float(p[1])
    m = h.matrix
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= _W_EPS:
        raise DegeneratePoint(f"Point ({x}, {y}) maps to infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def apply_homography_points(h: Homography, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`apply_homography` over an ``(N, 2)`` array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.hstack([pts, np.ones((len(pts), 1))]) @ h.matrix.T
    w = homog[:, 2]
    if np.any(np.abs(w) <= _W_EPS):
        raise DegeneratePoint("At least one point maps to infinity")
    return homog[:, :2] / w[:, None]


def invert_homography(h: Homography) -> Homography:
    """Inverse homography, normalised."""
    try:
        inv = np.linalg.inv(h.matrix)
    except np.linalg.LinAlgError as e:
        raise SingularTransform(str(e)) from e
    return Homography(inv)


def compose(a: Homography, b: Homography) -> Homography:
    """Homography that maps p to a(b(p))."""
    return Homography(a.matrix @ b.matrix)


def _as_homography(t: Transform) -> Homography:
    if isinstance(t, AffineTransform):
        return t.to_homography()
    return t


def _sample(channel: np.ndarray, coords: np.ndarray, order: int, mode: str = "constant") -> np.ndarray:
    return ndimage.map_coordinates(channel, coords, order=order, mode=mode, cval=0.0, prefilter=False)


def warp_image(
    img: Image,
    t: Transform,
    interpolation: str = "bilinear",
    output_shape: Optional[Tuple[int, int]] = None,
) -> Image:
    """Warp an image by inverse mapping.

    Output pixel ``q`` takes the source value at ``t^-1(q)``; samples that
    fall outside the source are filled with 0.

    Args:
        img: (H, W) or (H, W, C) array
        t: affine or projective transform mapping source to destination
        interpolation: "nearest" or "bilinear"
        output_shape: (height, width) of the output; the input's by default

    Returns:
        Warped image with the input's dtype
    """
    if interpolation not in ("nearest", "bilinear"):
        raise ValueError(f"Unknown interpolation '{interpolation}'")
    h = _as_homography(t)
    height, width = output_shape if output_shape is not None else img.shape[:2]
    if np.array_equal(h.matrix, np.eye(3)) and (height, width) == img.shape[:2]:
        return img.copy()

    inv = invert_homography(h)
    ys, xs = np.mgrid[0:height, 0:width]
    dest = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    try:
        src = apply_homography_points(inv, dest)
    except DegeneratePoint:
        # Horizon crosses the frame; such pixels stay empty.
        homog = np.hstack([dest, np.ones((len(dest), 1))]) @ inv.matrix.T
        w = homog[:, 2]
        w = np.where(np.abs(w) <= _W_EPS, np.nan, w)
        src = homog[:, :2] / w[:, None]
        src = np.nan_to_num(src, nan=-1e9)
    coords = np.stack([src[:, 1], src[:, 0]])
    order = 0 if interpolation == "nearest" else 1

    if img.ndim == 2:
        out = _sample(img.astype(np.float64), coords, order).reshape(height, width)
    else:
        out = np.stack(
            [_sample(img[..., c].astype(np.float64), coords, order).reshape(height, width)
             for c in range(img.shape[2])],
            axis=-1,
        )
    return out.astype(img.dtype, copy=False)


def resize_image(img: Image, size: Tuple[int, int], anti_aliasing: bool = True) -> Image:
    """Bilinear resize to ``size = (width, height)``.

    Uses the corner-aligned mapping ``x_src = x_dst * w_src / w_dst``, which
    matches :func:`keyreg.register.scale_keypoints`.
    """
    out_w, out_h = int(size[0]), int(size[1])
    in_h, in_w = img.shape[:2]
    if (out_w, out_h) == (in_w, in_h):
        return img.copy()
    sx, sy = in_w / out_w, in_h / out_h
    src = img.astype(np.float64)
    if anti_aliasing and (sx > 1 or sy > 1):
        sigma = [max(0.0, (sy - 1) / 2), max(0.0, (sx - 1) / 2)]
        if img.ndim == 3:
            sigma.append(0.0)
        src = ndimage.gaussian_filter(src, sigma=sigma, mode="nearest")
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    coords = np.stack([(ys * sy).ravel(), (xs * sx).ravel()])
    if img.ndim == 2:
        out = _sample(src, coords, 1, mode="nearest").reshape(out_h, out_w)
    else:
        out = np.stack(
            [_sample(src[..., c], coords, 1, mode="nearest").reshape(out_h, out_w)
             for c in range(img.shape[2])],
            axis=-1,
        )
    return out.astype(img.dtype, copy=False)


def resize_mask(mask: RoiMask, size: Tuple[int, int]) -> RoiMask:
    """Nearest-neighbour resize of a boolean mask to ``(width, height)``."""
    out_w, out_h = int(size[0]), int(size[1])
    in_h, in_w = mask.shape
    ys = np.minimum(np.round(np.arange(out_h) * in_h / out_h).astype(int), in_h - 1)
    xs = np.minimum(np.round(np.arange(out_w) * in_w / out_w).astype(int), in_w - 1)
    return mask[np.ix_(ys, xs)].astype(bool)


def _require_rgb(img: Image):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelMismatch(f"Expected a 3-channel image, got shape {img.shape}")


def rgb_to_hsv(img: Image) -> Image:
    """RGB to HSV with all channels in [0, 1]."""
    _require_rgb(img)
    return color.rgb2hsv(img).astype(img.dtype, copy=False)


def hsv_to_rgb(img: Image) -> Image:
    """HSV (all channels in [0, 1]) to RGB."""
    _require_rgb(img)
    return color.hsv2rgb(img).astype(img.dtype, copy=False)


def to_gray(img: Image, mode: str = "green") -> Image:
    """Single-channel view of an image for the detectors.

    Args:
        img: (H, W) or (H, W, 3) image
        mode: "green" (fundus default, highest vessel contrast) or "luma"

    Returns:
        (H, W) float array
    """
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    _require_rgb(img)
    if mode == "green":
        return img[..., 1]
    if mode == "luma":
        return color.rgb2gray(img).astype(img.dtype, copy=False)
    raise ValueError(f"Unknown gray mode '{mode}'")


def derive_roi(img: Image, threshold: float = 0.03) -> RoiMask:
    """Retinal RoI of a fundus image without an explicit mask.

    Thresholds mean intensity, keeps the largest connected component and
    fills its holes.
    """
    intensity = img.mean(axis=2) if img.ndim == 3 else img
    fg = intensity > threshold
    labels, count = ndimage.label(fg)
    if count == 0:
        return fg
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, count + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)
