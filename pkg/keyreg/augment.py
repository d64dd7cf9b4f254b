"""Training configuration, random view augmentation and multi-view batches."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Tuple

import numpy as np

from .errors import ChannelMismatch, ConfigError, RoiTooSmall
from .imagecore import AffineTransform, Image, Keypoint, RoiMask, hsv_to_rgb, rgb_to_hsv, warp_image
from .utils import stable_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of unsupervised descriptor training.

    Defaults are the ``paper`` preset; ``TrainConfig.preset("desk")`` is a
    CPU-sized variant with the same augmentation ranges.
    """

    views: int = 9
    keypoints_per_image: int = 1460
    epochs: int = 1000
    learning_rate: float = 1e-4
    fastap_bins: int = 10
    image_size: int = 565
    widths: Tuple[int, int, int] = (32, 64, 128)
    descriptor_dim: int = 128
    rotation_deg: float = 60.0
    translation_frac: float = 0.25
    scale_range: Tuple[float, float] = (0.75, 1.25)
    shear_deg: float = 30.0
    noise_sigma: float = 0.05
    noise_prob: float = 0.25
    hue_jitter: float = 0.02
    saturation_range: Tuple[float, float] = (0.9, 1.1)
    value_range: Tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    PRESETS = {
        "paper": {},
        "desk": {
            "views": 4,
            "keypoints_per_image": 256,
            "epochs": 50,
            "learning_rate": 1e-3,
            "image_size": 128,
            "widths": (8, 16, 32),
            "descriptor_dim": 32,
        },
    }

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "saturation_range", tuple(float(v) for v in self.saturation_range))
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))
        if self.views < 1:
            raise ConfigError("views must be >= 1")
        if self.keypoints_per_image < 2:
            raise ConfigError("keypoints_per_image must be >= 2")
        if self.fastap_bins < 2:
            raise ConfigError("fastap_bins must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if len(self.widths) != 3 or min(self.widths) < 1 or self.descriptor_dim < 1:
            raise ConfigError("widths needs three positive entries and descriptor_dim must be >= 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if not 0 <= self.rotation_deg <= 180:
            raise ConfigError("rotation_deg must be in [0, 180]")
        if not 0 <= self.translation_frac < 1:
            raise ConfigError("translation_frac must be in [0, 1)")
        if not 0 <= self.shear_deg < 90:
            raise ConfigError("shear_deg must be in [0, 90)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")
        if not 0 <= self.noise_prob <= 1 or self.noise_sigma < 0:
            raise ConfigError("noise_prob must be in [0, 1] and noise_sigma >= 0")
        if not 0 <= self.hue_jitter <= 0.5:
            raise ConfigError("hue_jitter must be in [0, 0.5]")
        for name in ("saturation_range", "value_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in cls.PRESETS:
            raise ConfigError(f"Unknown training preset '{name}'")
        return cls(**{**cls.PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def without_augmentation(self) -> "TrainConfig":
        """Same config with every augmentation range collapsed to the identity."""
        return replace(
            self, rotation_deg=0.0, translation_frac=0.0, scale_range=(1.0, 1.0), shear_deg=0.0,
            noise_prob=0.0, hue_jitter=0.0, saturation_range=(1.0, 1.0), value_range=(1.0, 1.0),
        )


def sample_affine(cfg: TrainConfig, size: Tuple[int, int], rng: np.random.Generator) -> AffineTransform:
    """Random affine about the image centre.

    Rotation, shear, isotropic scale and translation are drawn uniformly from
    the config ranges and composed as ``T(c + t) R Sh S T(-c)``.

    Args:
        cfg: training config with augmentation ranges
        size: (width, height) of the image
        rng: random generator

    Returns:
        The sampled transform (original -> view)
    """
    w, h = size
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shear = math.radians(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    scale = rng.uniform(*cfg.scale_range)
    tx = rng.uniform(-cfg.translation_frac, cfg.translation_frac) * w
    ty = rng.uniform(-cfg.translation_frac, cfg.translation_frac) * h

    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shr = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    linear = rot @ shr * scale
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = c + np.array([tx, ty]) - linear @ c
    return AffineTransform(np.hstack([linear, offset[:, None]]))


def jitter_hsv(img: Image, cfg: TrainConfig, rng: np.random.Generator) -> Image:
    """Random hue shift and saturation/value scaling; identity jitter leaves img untouched."""
    dh = rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)
    ds = rng.uniform(*cfg.saturation_range)
    dv = rng.uniform(*cfg.value_range)
    if dh == 0.0 and ds == 1.0 and dv == 1.0:
        return img
    hsv = rgb_to_hsv(img).astype(np.float64)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * dv, 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(img.dtype, copy=False)


def augment(img: Image, cfg: TrainConfig, rng: np.random.Generator) -> Tuple[Image, AffineTransform]:
    """One augmented view: affine warp, HSV jitter, then optional Gaussian noise.

    Every call draws the same number of random values so a seed fixes the
    whole sequence of views.

    Returns:
        (view image clamped to [0, 1], the affine used, original -> view)
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelMismatch(f"augment expects a 3-channel image, got shape {img.shape}")
    h, w = img.shape[:2]
    transform = sample_affine(cfg, (w, h), rng)
    view = warp_image(img, transform, "bilinear")
    view = jitter_hsv(view, cfg, rng)
    add_noise = rng.random() < cfg.noise_prob
    noise = rng.normal(0.0, cfg.noise_sigma, size=view.shape) if cfg.noise_sigma > 0 else None
    if add_noise and noise is not None:
        view = np.clip(view + noise, 0.0, 1.0).astype(img.dtype, copy=False)
    return view, transform


def sample_roi_keypoints(roi: RoiMask, k: int, rng: np.random.Generator) -> List[Keypoint]:
    """K distinct RoI pixels drawn uniformly without replacement.

    Raises:
        RoiTooSmall: the RoI holds fewer than K pixels
    """
    ys, xs = np.nonzero(np.asarray(roi, dtype=bool))
    if len(ys) < k:
        raise RoiTooSmall(f"RoI has {len(ys)} pixels, {k} requested")
    chosen = rng.choice(len(ys), size=k, replace=False)
    return [Keypoint(float(xs[i]), float(ys[i]), 1.0) for i in chosen]


@dataclass
class MultiViewBatch:
    """One original image plus N augmented views sharing K anchor identities.

    ``mapped[v]`` holds the anchors mapped into view v (an ``(K, 2)`` array)
    and ``visible[v]`` flags those that land inside the view.
    """

    images: List[Image]
    transforms: List[AffineTransform]
    anchors: np.ndarray
    mapped: List[np.ndarray] = field(default_factory=list)
    visible: List[np.ndarray] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.arange(len(self.anchors))

    @property
    def num_views(self) -> int:
        return len(self.transforms)

    def pooled_points(self) -> Tuple[List[np.ndarray], np.ndarray]:
        """Per-image point arrays (original first) and the pooled label vector."""
        points = [self.anchors]
        labels = [self.labels]
        for pts, vis in zip(self.mapped, self.visible):
            points.append(pts[vis])
            labels.append(self.labels[vis])
        return points, np.concatenate(labels)


def in_view(points: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Flags for (N, 2) points inside ``[0, w-1] x [0, h-1]`` of a (width, height) view."""
    w, h = size
    return (points[:, 0] >= 0) & (points[:, 0] <= w - 1) & (points[:, 1] >= 0) & (points[:, 1] <= h - 1)


def build_batch(img: Image, roi: RoiMask, cfg: TrainConfig, rng: np.random.Generator) -> MultiViewBatch:
    """Sample anchors in the RoI and N augmented views with mapped points."""
    h, w = img.shape[:2]
    anchors_kp = sample_roi_keypoints(roi, cfg.keypoints_per_image, rng)
    anchors = np.array([(kp.x, kp.y) for kp in anchors_kp], dtype=np.float64)
    batch = MultiViewBatch(images=[img], transforms=[], anchors=anchors)
    for _ in range(cfg.views):
        view, transform = augment(img, cfg, rng)
        pts = transform.apply(anchors)
        vis = in_view(pts, (w, h))
        batch.images.append(view)
        batch.transforms.append(transform)
        batch.mapped.append(pts)
        batch.visible.append(vis)
    return batch
