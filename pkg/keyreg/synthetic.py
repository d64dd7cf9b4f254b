"""Synthetic fundus-like images, registration pairs and dataset trees.

Images have a dark frame around a circular retinal region, smooth
illumination, multi-scale texture, a bright optic disc and dark branching
vessels. Vessel masks and logits come out of the same rendering, so every
vessel-keypoint mode can be exercised without a segmentation network.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage import draw

from .image_io import write_fmap, write_image, write_mask
from .imagecore import (
    Homography,
    Image,
    RoiMask,
    apply_homography_points,
    invert_homography,
    warp_image,
)

logger = logging.getLogger(__name__)

CATEGORY_WARPS = {
    # (rotation deg, translation fraction, scale spread, photometric gain spread)
    "S": (5.0, 0.03, 0.03, 0.05),
    "P": (5.0, 0.12, 0.03, 0.05),
    "A": (5.0, 0.03, 0.03, 0.15),
}


@dataclass
class SyntheticFundus:
    image: Image
    roi: RoiMask
    vessels: np.ndarray
    logits: np.ndarray


@dataclass
class SyntheticPair:
    """A fixed/moving pair where ``moving = warp(fixed, h_true)``.

    The registration target (moving -> fixed) is ``invert(h_true)``.
    """

    fixed: SyntheticFundus
    moving: SyntheticFundus
    h_true: Homography
    fixed_points: np.ndarray
    moving_points: np.ndarray

    @property
    def h_moving_to_fixed(self) -> Homography:
        return invert_homography(self.h_true)


def _texture(shape, rng: np.random.Generator) -> np.ndarray:
    tex = np.zeros(shape, dtype=np.float64)
    for sigma, amp in ((1.5, 0.05), (4.0, 0.08), (10.0, 0.10)):
        layer = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
        layer /= max(np.abs(layer).max(), 1e-12)
        tex += amp * layer
    return tex


def _vessel_tree(size: int, disc: Tuple[float, float], rng: np.random.Generator, count: int) -> np.ndarray:
    strength = np.zeros((size, size), dtype=np.float64)
    step = max(2.0, size / 64.0)
    for _ in range(count):
        line = np.zeros((size, size), dtype=np.float64)
        x, y = disc
        angle = rng.uniform(0, 2 * math.pi)
        width = rng.uniform(0.8, 1.8) * size / 256.0
        for _ in range(int(rng.integers(30, 70))):
            angle += rng.normal(0.0, 0.25)
            nx, ny = x + step * math.cos(angle), y + step * math.sin(angle)
            rr, cc = draw.line(int(round(y)), int(round(x)), int(round(ny)), int(round(nx)))
            keep = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            line[rr[keep], cc[keep]] = 1.0
            x, y = nx, ny
            if not (0 <= x < size and 0 <= y < size):
                break
        profile = ndimage.gaussian_filter(line, max(width, 0.8))
        peak = profile.max()
        if peak > 0:
            strength = np.maximum(strength, profile / peak)
    return strength


def fundus_image(size: int = 256, rng: Optional[np.random.Generator] = None, vessel_count: int = 10) -> SyntheticFundus:
    """Render one synthetic colour fundus image with its RoI, vessel mask and logits."""
    rng = rng if rng is not None else np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.46 * size
    dist = np.hypot(xx - c, yy - c)
    roi = dist <= radius

    illum = 0.55 + 0.25 * np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0)
    disc_angle = rng.uniform(0, 2 * math.pi)
    disc = (c + 0.45 * radius * math.cos(disc_angle), c + 0.45 * radius * math.sin(disc_angle))
    disc_r = 0.08 * size
    illum += 0.35 * np.exp(-((xx - disc[0]) ** 2 + (yy - disc[1]) ** 2) / (2 * disc_r ** 2))
    base = illum + _texture((size, size), rng)

    strength = _vessel_tree(size, disc, rng, vessel_count)
    vessels = (strength > 0.3) & roi
    shade = np.clip(base - 0.35 * strength, 0.0, 1.0)

    rgb = np.stack([0.95 * shade, 0.55 * shade, 0.25 * shade], axis=-1)
    rgb[~roi] = 0.0
    logits = np.where(roi, 10.0 * (strength - 0.3), -10.0)
    return SyntheticFundus(
        image=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        roi=roi,
        vessels=vessels,
        logits=logits.astype(np.float32),
    )


def random_homography(
    size: int,
    rng: np.random.Generator,
    rotation_deg: float = 5.0,
    translation_frac: float = 0.05,
    scale_spread: float = 0.05,
    perspective: float = 1e-5,
) -> Homography:
    """Random homography about the image centre with small perspective terms."""
    theta = math.radians(rng.uniform(-rotation_deg, rotation_deg))
    s = rng.uniform(1.0 - scale_spread, 1.0 + scale_spread)
    tx, ty = rng.uniform(-translation_frac, translation_frac, size=2) * size
    px, py = rng.uniform(-perspective, perspective, size=2)
    c = (size - 1) / 2.0
    to_origin = np.array([[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, c + tx], [0.0, 1.0, c + ty], [0.0, 0.0, 1.0]])
    core = np.array([
        [s * math.cos(theta), -s * math.sin(theta), 0.0],
        [s * math.sin(theta), s * math.cos(theta), 0.0],
        [px, py, 1.0],
    ])
    return Homography(back @ core @ to_origin)


def _warp_fundus(src: SyntheticFundus, h: Homography, gain: float, rng: np.random.Generator) -> SyntheticFundus:
    image = warp_image(src.image, h, "bilinear")
    image = np.clip(image * gain + rng.normal(0.0, 0.01, size=image.shape), 0.0, 1.0)
    roi = warp_image(src.roi.astype(np.float32), h, "nearest") > 0.5
    image[~roi] = 0.0
    vessels = warp_image(src.vessels.astype(np.float32), h, "nearest") > 0.5
    logits = warp_image(src.logits + 10.0, h, "bilinear") - 10.0
    return SyntheticFundus(image.astype(np.float32), roi, vessels, logits.astype(np.float32))


def control_points(fixed: SyntheticFundus, h: Homography, rng: np.random.Generator, count: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth correspondences inside the RoI whose images stay in frame."""
    size = fixed.roi.shape[0]
    inner = ndimage.binary_erosion(fixed.roi, iterations=max(1, size // 16))
    ys, xs = np.nonzero(inner)
    order = rng.permutation(len(ys))
    fixed_pts, moving_pts = [], []
    for i in order:
        p = np.array([[xs[i], ys[i]]], dtype=np.float64)
        q = apply_homography_points(h, p)[0]
        if 0 <= q[0] <= size - 1 and 0 <= q[1] <= size - 1:
            fixed_pts.append(p[0])
            moving_pts.append(q)
        if len(fixed_pts) == count:
            break
    return np.array(fixed_pts), np.array(moving_pts)


def make_pair(
    size: int = 256,
    rng: Optional[np.random.Generator] = None,
    category: str = "S",
    base: Optional[SyntheticFundus] = None,
) -> SyntheticPair:
    """Synthetic registration pair with the warp profile of a category."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rotation, translation, scale_spread, gain_spread = CATEGORY_WARPS[category]
    fixed = base if base is not None else fundus_image(size, rng)
    h = random_homography(size, rng, rotation, translation, scale_spread)
    gain = rng.uniform(1.0 - gain_spread, 1.0 + gain_spread)
    moving = _warp_fundus(fixed, h, gain, rng)
    fixed_pts, moving_pts = control_points(fixed, h, rng)
    return SyntheticPair(fixed, moving, h, fixed_pts, moving_pts)


def _write_fundus(directory: Path, stem: str, f: SyntheticFundus) -> None:
    write_image(directory / f"{stem}.png", f.image)
    write_mask(directory / f"{stem}_mask.png", f.roi)
    write_mask(directory / f"{stem}_vessel.png", f.vessels)
    write_fmap(directory / f"{stem}_logits.fmap", f.logits)


def write_fire_dataset(root: Path, pairs_per_category: int = 2, size: int = 256, seed: int = 0,
                       categories=("A", "P", "S")) -> List[str]:
    """Write a FIRE-layout tree of synthetic pairs.

    Layout: ``Images/<id>_1.png`` / ``<id>_2.png`` with ``_mask``, ``_vessel``
    and ``_logits`` companions, and ``Ground Truth/control_points_<id>_1_2.txt``
    holding ``x_fixed y_fixed x_moving y_moving`` per line.

    Returns:
        Pair ids in writing order
    """
    root = Path(root)
    images = root / "Images"
    gt = root / "Ground Truth"
    images.mkdir(parents=True, exist_ok=True)
    gt.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for category in categories:
        for k in range(pairs_per_category):
            pair_id = f"{category}{k + 1:02d}"
            pair = make_pair(size, rng, category)
            _write_fundus(images, f"{pair_id}_1", pair.fixed)
            _write_fundus(images, f"{pair_id}_2", pair.moving)
            with open(gt / f"control_points_{pair_id}_1_2.txt", "w") as f:
                for p, q in zip(pair.fixed_points, pair.moving_points):
                    f.write(f"{p[0]:.4f} {p[1]:.4f} {q[0]:.4f} {q[1]:.4f}\n")
            ids.append(pair_id)
    logger.info(f"Wrote {len(ids)} synthetic pairs to {root}")
    return ids


def write_training_folder(root: Path, count: int = 20, size: int = 128, seed: int = 0) -> List[Path]:
    """Write ``count`` synthetic training images with RoI, vessel and logit companions."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        stem = f"img{i:03d}"
        _write_fundus(root, stem, fundus_image(size, rng))
        paths.append(root / f"{stem}.png")
    logger.info(f"Wrote {count} synthetic training images to {root}")
    return paths
