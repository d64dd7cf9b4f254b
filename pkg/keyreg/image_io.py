"""Reading and writing images, masks, logit maps and keypoint lists."""

import csv
import logging
import struct
from pathlib import Path
from typing import List, Union

import numpy as np
from PIL import Image as PILImage

from .errors import DatasetError
from .imagecore import Image, Keypoint, RoiMask

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


def read_image(path: PathLike) -> Image:
    """Read an 8-bit PNG/JPEG into a float32 array in [0, 1].

    Args:
        path: Image file

    Returns:
        (H, W, 3) for colour files, (H, W) for gray files
    """
    try:
        with PILImage.open(path) as pil:
            if pil.mode not in ("L", "RGB"):
                pil = pil.convert("RGB")
            data = np.asarray(pil, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read image {path}: {e}") from e
    return data


def write_image(path: PathLike, img: Image) -> None:
    """Write a [0, 1] float image as 8-bit PNG/JPEG (by extension)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def read_mask(path: PathLike) -> RoiMask:
    """Read a binary PNG mask; any nonzero pixel is foreground."""
    try:
        with PILImage.open(path) as pil:
            data = np.asarray(pil.convert("L"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read mask {path}: {e}") from e
    return data > 0


def write_mask(path: PathLike, mask: RoiMask) -> None:
    """Write a boolean mask as 0/255 PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def read_fmap(path: PathLike) -> np.ndarray:
    """Read a float map in the FMAP binary format.

    Layout: magic ``FMAP``, u32 width, u32 height, u32 channels (all
    little-endian), then width*height*channels little-endian float32 values
    in row-major (y, x, c) order.

    Returns:
        (H, W) array for one channel, (H, W, C) otherwise
    """
    raw = Path(path).read_bytes()
    if len(raw) < _FMAP_HEADER.size:
        raise DatasetError(f"{path}: truncated FMAP header")
    magic, width, height, channels = _FMAP_HEADER.unpack_from(raw, 0)
    if magic != FMAP_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    count = width * height * channels
    body = raw[_FMAP_HEADER.size:]
    if len(body) != 4 * count:
        raise DatasetError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(height, width, channels)
    return data[..., 0] if channels == 1 else data


def write_fmap(path: PathLike, data: np.ndarray) -> None:
    """Write a float map in the FMAP binary format."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    height, width, channels = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FMAP_HEADER.pack(FMAP_MAGIC, width, height, channels))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_logits_png16(path: PathLike, scale: float = 1.0, offset: float = 0.0) -> np.ndarray:
    """Read a single-channel 16-bit PNG of logits as ``value * scale + offset``."""
    try:
        with PILImage.open(path) as pil:
            data = np.asarray(pil, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read logits {path}: {e}") from e
    if data.ndim != 2:
        raise DatasetError(f"{path}: logit PNG must be single-channel")
    return (data * scale + offset).astype(np.float32)


def read_logits(path: PathLike, scale: float = 1.0, offset: float = 0.0) -> np.ndarray:
    """Read logits from an FMAP file or a 16-bit PNG (by extension)."""
    if Path(path).suffix.lower() == ".png":
        return read_logits_png16(path, scale, offset)
    return read_fmap(path)


def write_keypoints(path: PathLike, kps: List[Keypoint]) -> None:
    """Write keypoints as CSV with header ``x,y,response``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "response"])
        for kp in kps:
            writer.writerow([repr(float(kp.x)), repr(float(kp.y)), repr(float(kp.response))])


def read_keypoints(path: PathLike) -> List[Keypoint]:
    """Read a keypoint CSV written by :func:`write_keypoints`.

    A missing ``response`` column defaults every response to 1.
    """
    kps = []
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for row in reader:
                kps.append(Keypoint(float(row["x"]), float(row["y"]), float(row.get("response") or 1.0)))
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(f"Cannot read keypoints {path}: {e}") from e
    return kps
