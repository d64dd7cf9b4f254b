"""Dense descriptor network, descriptor sampling and the patch fallback.

A descriptor map is an ``(H, W, D)`` float32 array of unit vectors. Both the
network path and the patch path are exposed through :class:`DescriptorSource`
so registration does not care where descriptors come from.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ImageTooSmall, OutOfBounds, PatchOutOfBounds
from .imagecore import Image, Keypoint, keypoints_to_array, to_gray

logger = logging.getLogger(__name__)

STRIDE = 8
MIN_SIZE = 8


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class DescriptorNet(nn.Module):
    """Fully convolutional encoder-decoder with skip connections.

    Three 2x downsampling levels, three upsampling levels, 3x3 convolutions,
    a final 1x1 projection to ``dim`` channels and per-pixel L2 normalisation.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128), dim: int = 128, in_channels: int = 3):
        super().__init__()
        w1, w2, w3 = (int(w) for w in widths)
        self.widths = (w1, w2, w3)
        self.dim = int(dim)
        self.in_channels = int(in_channels)
        self.enc1 = _block(in_channels, w1)
        self.enc2 = _block(w1, w2)
        self.enc3 = _block(w2, w3)
        self.bottleneck = _block(w3, w3)
        self.dec3 = _block(2 * w3, w2)
        self.dec2 = _block(2 * w2, w1)
        self.dec1 = _block(2 * w1, w1)
        self.head = nn.Conv2d(w1, dim, kernel_size=1)

    @staticmethod
    def _up(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        pad_h = (-h) % STRIDE
        pad_w = (-w) % STRIDE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        b = self.bottleneck(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([self._up(b, e3), e3], dim=1))
        d2 = self.dec2(torch.cat([self._up(d3, e2), e2], dim=1))
        d1 = self.dec1(torch.cat([self._up(d2, e1), e1], dim=1))
        out = F.normalize(self.head(d1), p=2, dim=1)
        return out[..., :h, :w]


class NetworkParams:
    """Trained descriptor network plus its metadata (dim, config hash, epochs)."""

    def __init__(self, net: DescriptorNet, metadata: Optional[Dict] = None):
        self.net = net
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("dim", net.dim)
        self.metadata.setdefault("widths", list(net.widths))
        self.metadata.setdefault("in_channels", net.in_channels)
        self.metadata.setdefault("epochs", 0)

    @classmethod
    def create(cls, widths=(32, 64, 128), dim: int = 128, in_channels: int = 3, seed: Optional[int] = None,
               metadata: Optional[Dict] = None) -> "NetworkParams":
        if seed is not None:
            torch.manual_seed(seed)
        return cls(DescriptorNet(widths, dim, in_channels), metadata)

    @property
    def dim(self) -> int:
        return self.net.dim

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}


def image_to_tensor(img: Image, in_channels: int = 3) -> torch.Tensor:
    """(H, W[, C]) image to a (1, C, H, W) float32 tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], in_channels, axis=2)
    if arr.shape[2] != in_channels:
        if in_channels == 1:
            arr = to_gray(arr)[..., None]
        else:
            raise ConfigError(f"Network expects {in_channels} channels, image has {arr.shape[2]}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def describe(params: NetworkParams, img: Image) -> np.ndarray:
    """Dense descriptor map of an image.

    Returns:
        (H, W, D) float32 array of unit vectors
    """
    if min(img.shape[:2]) < MIN_SIZE:
        raise ImageTooSmall(f"Descriptor network needs sides >= {MIN_SIZE}, got {img.shape[:2]}")
    net = params.net
    net.eval()
    with torch.no_grad():
        out = net(image_to_tensor(img, net.in_channels))
    return out[0].permute(1, 2, 0).contiguous().numpy()


def sample_descriptors(dmap: np.ndarray, kps: Sequence[Keypoint]) -> np.ndarray:
    """Bilinear interpolation of a descriptor map at keypoints, renormalised.

    Raises:
        OutOfBounds: a keypoint lies outside ``[0, W-1] x [0, H-1]``
    """
    h, w, d = dmap.shape
    pts = keypoints_to_array(kps)
    if len(pts) == 0:
        return np.zeros((0, d), dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    if np.any((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)):
        raise OutOfBounds("Keypoint outside descriptor map")
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    field = dmap.astype(np.float64, copy=False)
    out = ((1 - fx) * (1 - fy) * field[y0, x0] + fx * (1 - fy) * field[y0, x1]
           + (1 - fx) * fy * field[y1, x0] + fx * fy * field[y1, x1])
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(norms > 0, out / np.where(norms > 0, norms, 1.0), 0.0)


def sample_descriptors_tensor(dmap: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear sampling of a (D, H, W) map at (N, 2) pixel points."""
    d, h, w = dmap.shape
    gx = 2.0 * points[:, 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * points[:, 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(dmap.dtype)[None, None]
    sampled = F.grid_sample(dmap[None], grid, mode="bilinear", align_corners=True)
    return F.normalize(sampled[0, :, 0].t(), p=2, dim=1)


def patch_descriptor(img: Image, kp: Keypoint, size: int = 11) -> np.ndarray:
    """Mean-subtracted, L2-normalised raw patch around the nearest pixel.

    A constant patch yields the zero vector, which marks it non-discriminative.

    Raises:
        PatchOutOfBounds: the patch is not fully inside the image
    """
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"Patch size must be odd and >= 1, got {size}")
    gray = img if img.ndim == 2 else to_gray(img)
    half = size // 2
    cx, cy = int(round(kp.x)), int(round(kp.y))
    h, w = gray.shape
    if cx - half < 0 or cy - half < 0 or cx + half >= w or cy + half >= h:
        raise PatchOutOfBounds(f"Patch of size {size} at ({kp.x}, {kp.y}) leaves the image")
    patch = np.asarray(gray[cy - half:cy + half + 1, cx - half:cx + half + 1], dtype=np.float64).ravel()
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm <= 1e-12:
        return np.zeros_like(patch)
    return patch / norm


class DescriptorSource:
    """Something that turns (image, keypoints) into descriptors."""

    name = "abstract"

    def describe_keypoints(self, img: Image, kps: Sequence[Keypoint]) -> Tuple[List[Keypoint], np.ndarray]:
        """Describe keypoints, dropping those that cannot be described.

        Returns:
            (kept keypoints, (len(kept), D) descriptors)
        """
        raise NotImplementedError


class PatchDescriptorSource(DescriptorSource):
    """Non-learned patch descriptors; keypoints near the border or on flat patches are dropped."""

    name = "patch"

    def __init__(self, size: int = 11, gray_mode: str = "green"):
        if size < 1 or size % 2 == 0:
            raise ConfigError(f"Patch size must be odd and >= 1, got {size}")
        self.size = size
        self.gray_mode = gray_mode

    def describe_keypoints(self, img, kps):
        gray = to_gray(img, self.gray_mode) if img.ndim == 3 else img
        kept, descs = [], []
        for kp in kps:
            try:
                vec = patch_descriptor(gray, kp, self.size)
            except PatchOutOfBounds:
                continue
            if not vec.any():
                continue
            kept.append(kp)
            descs.append(vec)
        if not descs:
            return [], np.zeros((0, self.size * self.size))
        return kept, np.stack(descs)


class NetworkDescriptorSource(DescriptorSource):
    """Descriptors sampled from the dense map of a trained network."""

    name = "network"

    def __init__(self, params: NetworkParams):
        self.params = params

    def describe_keypoints(self, img, kps):
        dmap = describe(self.params, img)
        h, w = dmap.shape[:2]
        kept = [kp for kp in kps if 0 <= kp.x <= w - 1 and 0 <= kp.y <= h - 1]
        return kept, sample_descriptors(dmap, kept)
