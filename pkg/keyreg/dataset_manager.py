"""Dataset discovery, manifests and ground-truth loading."""

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import DatasetError, MissingControlPoints, UnparseablePointFile
from .evaluate import CATEGORIES, ControlPointSet
from .image_io import read_image, read_keypoints, read_logits, read_mask
from .imagecore import Image, Keypoint, RoiMask, derive_roi
from .utils import stable_hash

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
COMPANION_TAGS = ("_mask", "_vessel", "_logits", "_kps")
GT_ORDERS = ("fixed-first", "moving-first")
_CONTROL_POINTS = re.compile(r"^control_points_(?P<pair>[A-Za-z]\w*?)_1_2\.txt$")


@dataclass
class ImageEntry:
    """An image and its optional companion files, as paths relative to the manifest root."""

    image: str
    roi_mask: Optional[str] = None
    vessel_mask: Optional[str] = None
    logits: Optional[str] = None
    keypoints: Optional[str] = None


@dataclass
class PairEntry:
    pair_id: str
    category: str
    fixed: ImageEntry
    moving: ImageEntry
    control_points: str


@dataclass
class DatasetManifest:
    """Everything a run reads: image entries (train) or registration pairs (eval)."""

    root: str
    split: str
    images: List[ImageEntry] = field(default_factory=list)
    pairs: List[PairEntry] = field(default_factory=list)
    gt_order: str = "fixed-first"

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetManifest":
        try:
            return cls(
                root=data["root"],
                split=data["split"],
                images=[ImageEntry(**e) for e in data.get("images", [])],
                pairs=[
                    PairEntry(
                        pair_id=p["pair_id"],
                        category=p["category"],
                        fixed=ImageEntry(**p["fixed"]),
                        moving=ImageEntry(**p["moving"]),
                        control_points=p["control_points"],
                    )
                    for p in data.get("pairs", [])
                ],
                gt_order=data.get("gt_order", "fixed-first"),
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"Malformed manifest: {e}") from e

    def manifest_hash(self) -> str:
        return stable_hash(self.to_dict())

    def category_counts(self) -> Dict[str, int]:
        return {c: sum(1 for p in self.pairs if p.category == c) for c in CATEGORIES}

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4, sort_keys=True)

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"Cannot read manifest {path}: {e}") from e


@dataclass
class LoadedImage:
    """Pixel data of an ImageEntry; the RoI is derived when no mask file exists."""

    image: Image
    roi: RoiMask
    vessel_mask: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    keypoints: Optional[List[Keypoint]] = None


class DatasetManager:
    """Finds datasets on disk and loads their contents."""

    def __init__(self, logger: Optional[logging.Logger] = None):
        """Initialize the dataset manager.

        Args:
            logger: Optional logger instance
        """
        self.logger = logger or logging.getLogger(__name__)

    @staticmethod
    def _is_companion(path: Path) -> bool:
        return any(path.stem.endswith(tag) for tag in COMPANION_TAGS)

    def _companions(self, root: Path, image: Path, shared_mask: Optional[Path] = None) -> ImageEntry:
        def rel(p: Optional[Path]) -> Optional[str]:
            return p.relative_to(root).as_posix() if p is not None else None

        def first(*names) -> Optional[Path]:
            for name in names:
                candidate = image.with_name(name)
                if candidate.exists():
                    return candidate
            return None

        stem = image.stem
        roi = first(f"{stem}_mask.png") or shared_mask
        return ImageEntry(
            image=rel(image),
            roi_mask=rel(roi),
            vessel_mask=rel(first(f"{stem}_vessel.png")),
            logits=rel(first(f"{stem}_logits.fmap", f"{stem}_logits.png")),
            keypoints=rel(first(f"{stem}_kps.csv")),
        )

    def _find_image(self, root: Path, stem: str) -> Path:
        for suffix in IMAGE_SUFFIXES:
            hits = sorted(root.rglob(f"{stem}{suffix}"))
            if hits:
                return hits[0]
        raise DatasetError(f"Image '{stem}' not found under {root}")

    def load_fire(self, root: Path, gt_order: str = "fixed-first") -> DatasetManifest:
        """Discover a FIRE-layout dataset.

        Pairs come from ``control_points_<id>_1_2.txt`` files anywhere under
        root; the category is the first letter of the id; images are
        ``<id>_1.*`` (fixed) and ``<id>_2.*`` (moving). A ``Masks/mask.png``
        is used as RoI for images without their own ``_mask`` file.

        Raises:
            MissingControlPoints: no control-point files
            UnparseablePointFile: a malformed control-point line
            DatasetError: missing images or an invalid gt_order
        """
        if gt_order not in GT_ORDERS:
            raise DatasetError(f"gt_order must be one of {GT_ORDERS}, got '{gt_order}'")
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"Dataset root {root} does not exist")
        shared = root / "Masks" / "mask.png"
        shared_mask = shared if shared.exists() else None

        pairs = []
        for cp_file in sorted(root.rglob("control_points_*_1_2.txt")):
            match = _CONTROL_POINTS.match(cp_file.name)
            if not match:
                continue
            pair_id = match.group("pair")
            category = pair_id[0].upper()
            if category not in CATEGORIES:
                self.logger.warning(f"Skipping pair {pair_id}: unknown category '{category}'")
                continue
            self.parse_control_points(cp_file)
            pairs.append(PairEntry(
                pair_id=pair_id,
                category=category,
                fixed=self._companions(root, self._find_image(root, f"{pair_id}_1"), shared_mask),
                moving=self._companions(root, self._find_image(root, f"{pair_id}_2"), shared_mask),
                control_points=cp_file.relative_to(root).as_posix(),
            ))
        if not pairs:
            raise MissingControlPoints(f"No control point files under {root}")
        pairs.sort(key=lambda p: p.pair_id)
        manifest = DatasetManifest(str(root), "eval", pairs=pairs, gt_order=gt_order)
        counts = manifest.category_counts()
        self.logger.info(
            f"Loaded {len(pairs)} pairs from {root} (A={counts['A']}, P={counts['P']}, S={counts['S']})"
        )
        return manifest

    def load_image_folder(self, root: Path) -> DatasetManifest:
        """Collect every image under root (companion files excluded) as a training manifest."""
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"Dataset root {root} does not exist")
        images = [
            p for p in sorted(root.rglob("*"))
            if p.suffix.lower() in IMAGE_SUFFIXES and not self._is_companion(p)
        ]
        if not images:
            raise DatasetError(f"No images under {root}")
        entries = [self._companions(root, p) for p in images]
        self.logger.info(f"Found {len(entries)} training images under {root}")
        return DatasetManifest(str(root), "train", images=entries)

    def image_entry(self, path: Path) -> ImageEntry:
        """Entry for a single image with absolute paths, for use outside a dataset root."""
        path = Path(path).resolve()
        if not path.is_file():
            raise DatasetError(f"Image {path} does not exist")
        entry = self._companions(path.parent, path)
        return ImageEntry(**{
            k: (path.parent / v).as_posix() if v is not None else None
            for k, v in asdict(entry).items()
        })

    def parse_control_points(self, path: Path) -> np.ndarray:
        """Read an ``(N, 4)`` array of control-point rows; blank lines are skipped."""
        rows = []
        try:
            with open(path, "r") as f:
                for lineno, line in enumerate(f, start=1):
                    parts = line.split()
                    if not parts:
                        continue
                    if len(parts) != 4:
                        raise UnparseablePointFile(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
                    try:
                        rows.append([float(v) for v in parts])
                    except ValueError as e:
                        raise UnparseablePointFile(f"{path}:{lineno}: {e}") from e
        except OSError as e:
            raise DatasetError(f"Cannot read {path}: {e}") from e
        if not rows:
            raise UnparseablePointFile(f"{path}: no control points")
        return np.array(rows, dtype=np.float64)

    def control_points(self, manifest: DatasetManifest, pair: PairEntry) -> ControlPointSet:
        rows = self.parse_control_points(manifest.path(pair.control_points))
        first, second = rows[:, :2], rows[:, 2:]
        if manifest.gt_order == "moving-first":
            first, second = second, first
        return ControlPointSet(pair.pair_id, pair.category, fixed=first, moving=second)

    def load_entry(
        self,
        manifest: DatasetManifest,
        entry: ImageEntry,
        logit_scale: float = 1.0,
        logit_offset: float = 0.0,
    ) -> LoadedImage:
        """Read an image and every companion file it lists."""
        image = read_image(manifest.path(entry.image))
        if entry.roi_mask is not None:
            roi = read_mask(manifest.path(entry.roi_mask))
            if roi.shape != image.shape[:2]:
                self.logger.warning(f"RoI mask of {entry.image} has the wrong size; deriving one")
                roi = derive_roi(image)
        else:
            roi = derive_roi(image)
        return LoadedImage(
            image=image,
            roi=roi,
            vessel_mask=read_mask(manifest.path(entry.vessel_mask)) if entry.vessel_mask else None,
            logits=(read_logits(manifest.path(entry.logits), logit_scale, logit_offset)
                    if entry.logits else None),
            keypoints=read_keypoints(manifest.path(entry.keypoints)) if entry.keypoints else None,
        )
