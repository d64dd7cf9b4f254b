"""Experiment orchestration: calibrate, register every pair, score, write artifacts."""

import json
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .calibration import GRID_BUDGETS, CalibrationResult, calibrate_budget
from .checkpoint_manager import CheckpointManager
from .config_manager import ConfigManager, parse_budget
from .dataset_manager import DatasetManager, DatasetManifest, ImageEntry, LoadedImage, PairEntry
from .descriptor import DescriptorSource, NetworkDescriptorSource, PatchDescriptorSource
from .detect import DETECTOR_KINDS, DetectorParams, detect_keypoints
from .errors import ConfigError, DatasetError, KeyregError
from .evaluate import ScoreReport, aggregate, pair_error, table_row, write_table
from .image_io import write_image
from .imagecore import Image, Keypoint, RoiMask, resize_image, resize_mask
from .register import (
    STATUS_ERROR,
    RegisterConfig,
    RegistrationResult,
    filter_to_roi,
    register_pair,
    render_overlay,
    scale_keypoints,
    working_roi,
)
from .utils import ensure_directory, format_duration, stable_hash
from .vessel_keypoints import VesselMask, detect_on_logits, parse_vessel_mode, vessel_keypoints

# Keys that change where or how fast a run happens, never its results.
_VOLATILE_KEYS = ("out", "workers", "log_level", "write_overlays")


@dataclass(frozen=True)
class DetectorSpec:
    """Which keypoints a run uses.

    ``source`` is "image" or "logits" for the classical detectors (and the
    grid baseline), "vessel" for vessel-mask keypoints and "external" for
    per-image keypoint files. ``budget`` None means unlimited.
    """

    kind: str
    source: str = "image"
    budget: Optional[int] = None
    vessel_mode: Optional[str] = None

    @classmethod
    def parse(cls, text: str, default_budget: Optional[int] = None) -> "DetectorSpec":
        """Parse ``harris@500``, ``harris@unlimited``, ``logits:censure@500``,
        ``vessel:skeleton``, ``vessel:subsample:5``, ``external`` or ``grid@40000``.

        Without an ``@`` suffix the budget is ``default_budget``.
        """
        text = text.strip()
        if text == "external":
            return cls("external", "external")
        if text.startswith("vessel:"):
            mode = text[len("vessel:"):]
            parse_vessel_mode(mode)
            return cls("vessel", "vessel", vessel_mode=mode)

        source = "image"
        if text.startswith("logits:"):
            source = "logits"
            text = text[len("logits:"):]
        kind, sep, budget_text = text.partition("@")
        if kind not in DETECTOR_KINDS:
            raise ConfigError(f"Unknown detector '{kind}'")
        if source == "logits" and kind == "grid":
            raise ConfigError("The grid baseline does not read logits")
        budget = default_budget
        if sep:
            budget = parse_budget(budget_text)
        if kind == "grid" and budget is None:
            raise ConfigError(f"The grid baseline needs a finite budget, one of {GRID_BUDGETS}")
        return cls(kind, source, budget)

    @property
    def calibrated(self) -> bool:
        return self.source in ("image", "logits")

    @property
    def name(self) -> str:
        if self.source == "vessel":
            return f"vessel:{self.vessel_mode}"
        if self.source == "logits":
            return f"logits:{self.kind}"
        return self.kind

    @property
    def budget_label(self) -> str:
        if not self.calibrated:
            return "-"
        return "unlimited" if self.budget is None else str(self.budget)

    @property
    def label(self) -> str:
        if not self.calibrated:
            return self.name
        return f"{self.name}@{self.budget_label}"

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9_.-]+", "_", self.label)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one registration experiment needs."""

    detector: DetectorSpec
    register: RegisterConfig = field(default_factory=RegisterConfig)
    sensitivity: Optional[float] = None
    nms_radius: float = 3.0
    gray_mode: str = "green"
    calibration_iterations: int = 40
    external_native: bool = False
    checkpoint: Optional[str] = None
    patch_size: int = 11
    eval_max_threshold: float = 25.0
    eval_step: float = 1.0
    seed: int = 0
    workers: int = 1
    out: Path = Path("keyreg-out")
    write_overlays: bool = False
    logit_scale: float = 1.0
    logit_offset: float = 0.0
    settings: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be odd and >= 1")
        if self.calibration_iterations < 1:
            raise ConfigError("calibration_iterations must be >= 1")

    @classmethod
    def from_config_manager(cls, config: ConfigManager) -> "ExperimentConfig":
        vessel = config.get("vessel_kp")
        text = f"vessel:{vessel}" if vessel else str(config.get("detector"))
        sensitivity = config.get("sensitivity")
        return cls(
            detector=DetectorSpec.parse(text, parse_budget(config.get("budget"))),
            register=config.register_config(),
            sensitivity=float(sensitivity) if sensitivity is not None else None,
            nms_radius=float(config.get("nms_radius")),
            gray_mode=str(config.get("gray_mode")),
            calibration_iterations=int(config.get("calibration_iterations")),
            external_native=bool(config.get("external_native")),
            checkpoint=config.get("checkpoint"),
            patch_size=int(config.get("patch_size")),
            eval_max_threshold=float(config.get("eval_max_threshold")),
            eval_step=float(config.get("eval_step")),
            seed=int(config.get("seed")),
            workers=int(config.get("workers")),
            out=Path(config.get("out")),
            write_overlays=bool(config.get("write_overlays")),
            logit_scale=float(config.get("logit_scale")),
            logit_offset=float(config.get("logit_offset")),
            settings=config.get_config_dict(),
        )

    def config_hash(self) -> str:
        """Digest of every result-affecting setting, including the detector in use."""
        relevant = {k: v for k, v in self.settings.items() if k not in _VOLATILE_KEYS}
        relevant.update({"detector": self.detector.label, "vessel_kp": None, "budget": self.detector.budget_label})
        return stable_hash(relevant)


@dataclass
class WorkingImage:
    """An image and its companions resized to working resolution."""

    name: str
    native: LoadedImage
    image: Image
    roi: RoiMask
    vessel_mask: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    keypoints: Optional[List[Keypoint]] = None


@dataclass
class PairOutcome:
    """Registration status and control-point error of one pair."""

    pair_id: str
    category: str
    mean_error: float
    status: str
    message: str = ""
    num_keypoints: Optional[Tuple[int, int]] = None
    result: Optional[RegistrationResult] = None

    def to_dict(self) -> Dict:
        data = {
            "pair": self.pair_id,
            "category": self.category,
            "mean_error": self.mean_error if math.isfinite(self.mean_error) else None,
            "status": self.status,
            "message": self.message,
            "num_keypoints": list(self.num_keypoints) if self.num_keypoints is not None else None,
        }
        if self.result is not None:
            data["registration"] = self.result.to_dict()
        return data


class ExperimentEngine:
    """Runs registration experiments over a dataset manifest.

    One run calibrates the detector on the evaluation images, registers every
    pair (in parallel when ``workers > 1``), scores the homographies against
    the control points and writes a reproducible set of artifacts. A failing
    pair becomes a failed row; it never aborts the run.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        dataset_manager: Optional[DatasetManager] = None,
        checkpoint_manager: Optional[CheckpointManager] = None,
        logger: Optional[logging.Logger] = None,
    ):
        """Initialize the experiment engine.

        Args:
            config: Experiment configuration
            dataset_manager: Dataset manager instance
            checkpoint_manager: Checkpoint manager instance
            logger: Optional logger instance
        """
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.datasets = dataset_manager or DatasetManager(self.logger)
        self.checkpoints = checkpoint_manager or CheckpointManager(self.logger)
        self._source: Optional[DescriptorSource] = None

        self.run_in_progress = False
        self.last_report: Optional[ScoreReport] = None
        self.last_calibration: Optional[CalibrationResult] = None
        self.last_grid_failures = 0

        # Callbacks
        self.on_run_start: Optional[Callable[[int], None]] = None
        self.on_pair_complete: Optional[Callable[[PairOutcome], None]] = None
        self.on_run_complete: Optional[Callable[[bool, str], None]] = None

    # --- Components ---------------------------------------------------------

    def descriptor_source(self) -> DescriptorSource:
        """Network descriptors when a checkpoint is configured, patch descriptors otherwise.

        Raises:
            ConfigError: the checkpoint cannot be loaded
        """
        if self._source is not None:
            return self._source
        cfg = self.config
        if cfg.checkpoint:
            ok, message = self.checkpoints.verify(Path(cfg.checkpoint))
            if not ok:
                raise ConfigError(f"Checkpoint {cfg.checkpoint} is not loadable: {message}")
            self._source = NetworkDescriptorSource(self.checkpoints.load(Path(cfg.checkpoint)))
        else:
            self._source = PatchDescriptorSource(cfg.patch_size, cfg.gray_mode)
        self.logger.info(f"Descriptor source: {self._source.name}")
        return self._source

    def base_params(self) -> Optional[DetectorParams]:
        spec = self.config.detector
        if not spec.calibrated:
            return None
        params = DetectorParams(
            kind=spec.kind,
            sensitivity=self.config.sensitivity,
            nms_radius=self.config.nms_radius,
            gray_mode=self.config.gray_mode,
        )
        if spec.kind == "grid":
            params = replace(params, grid_target=spec.budget)
        return params

    def load_working(self, manifest: DatasetManifest, entry: ImageEntry) -> WorkingImage:
        """Load an entry and bring it to working resolution."""
        cfg = self.config
        loaded = self.datasets.load_entry(manifest, entry, cfg.logit_scale, cfg.logit_offset)
        ws = cfg.register.working_size
        work = (ws, ws)
        native_size = (loaded.image.shape[1], loaded.image.shape[0])
        keypoints = loaded.keypoints
        if keypoints is not None and cfg.external_native:
            keypoints = scale_keypoints(keypoints, native_size, work)
        return WorkingImage(
            name=entry.image,
            native=loaded,
            image=resize_image(loaded.image, work),
            roi=working_roi(loaded.image, loaded.roi, ws, cfg.register.roi_margin),
            vessel_mask=resize_mask(loaded.vessel_mask, work) if loaded.vessel_mask is not None else None,
            logits=(resize_image(loaded.logits.astype(np.float32), work, anti_aliasing=False)
                    if loaded.logits is not None else None),
            keypoints=keypoints,
        )

    def detect(self, params: Optional[DetectorParams], w: WorkingImage) -> List[Keypoint]:
        """Keypoints of a working image inside its RoI.

        Raises:
            DatasetError: the companion file the detector needs is missing
        """
        spec = self.config.detector
        if spec.source == "image":
            kps = detect_keypoints(w.image, params, w.roi)
        elif spec.source == "logits":
            if w.logits is None:
                raise DatasetError(f"No logits for {w.name}")
            kps = detect_on_logits(params, w.logits, w.roi)
        elif spec.source == "vessel":
            if w.vessel_mask is not None:
                mask = VesselMask(w.vessel_mask)
            elif w.logits is not None:
                mask = VesselMask.from_logits(w.logits)
            else:
                raise DatasetError(f"No vessel mask or logits for {w.name}")
            kps = vessel_keypoints(mask, spec.vessel_mode, w.roi)
        else:
            if w.keypoints is None:
                raise DatasetError(f"No external keypoint file for {w.name}")
            kps = w.keypoints
        return filter_to_roi(kps, w.roi)

    # --- Calibration --------------------------------------------------------

    @staticmethod
    def calibration_entries(manifest: DatasetManifest) -> List[ImageEntry]:
        """Every distinct image of the manifest, pairs first."""
        entries, seen = [], set()
        for pair in manifest.pairs:
            for entry in (pair.fixed, pair.moving):
                if entry.image not in seen:
                    seen.add(entry.image)
                    entries.append(entry)
        for entry in manifest.images:
            if entry.image not in seen:
                seen.add(entry.image)
                entries.append(entry)
        return entries

    def calibrate(self, manifest: DatasetManifest) -> Tuple[Optional[DetectorParams], Optional[CalibrationResult]]:
        """Detector parameters for the configured budget, calibrated on all manifest images.

        An explicit sensitivity skips calibration. Vessel and external keypoints
        have no sensitivity and return (None, None).
        """
        cfg = self.config
        spec = cfg.detector
        params = self.base_params()
        if params is None:
            return None, None
        if cfg.sensitivity is not None and spec.kind != "grid":
            self.logger.info(f"{spec.name}: using explicit sensitivity {cfg.sensitivity}")
            return params, None

        entries = self.calibration_entries(manifest)
        if not entries:
            raise DatasetError("No images to calibrate on")
        working = [self.load_working(manifest, e) for e in entries]
        rois = [w.roi for w in working]
        if spec.source == "logits":
            if any(w.logits is None for w in working):
                raise DatasetError("Calibration over logits needs a logit map for every image")
            images = [w.logits for w in working]

            def count(img, p, roi):
                return len(filter_to_roi(detect_on_logits(p, img, roi), roi))
        else:
            images = [w.image for w in working]

            def count(img, p, roi):
                return len(filter_to_roi(detect_keypoints(img, p, roi), roi))

        result = calibrate_budget(
            params, images, spec.budget, rois, cfg.calibration_iterations, cfg.workers, count_fn=count
        )
        if spec.kind != "grid":
            params = params.with_sensitivity(result.sensitivity)
        self.last_calibration = result
        return params, result

    # --- Registration -------------------------------------------------------

    def _register(self, manifest: DatasetManifest, pair: PairEntry, params: Optional[DetectorParams]) -> PairOutcome:
        cfg = self.config
        stage = "load"
        counts = None
        try:
            fixed = self.load_working(manifest, pair.fixed)
            moving = self.load_working(manifest, pair.moving)
            cps = self.datasets.control_points(manifest, pair)

            stage = "detect"
            kps_f = self.detect(params, fixed)
            kps_m = self.detect(params, moving)
            counts = (len(kps_f), len(kps_m))

            stage = "register"
            result = register_pair(
                fixed.native.image,
                moving.native.image,
                params,
                self.descriptor_source(),
                cfg.register,
                fixed_roi=fixed.native.roi,
                moving_roi=moving.native.roi,
                keypoints=(kps_f, kps_m),
            )
            error = pair_error(result.homography, cps)
            if result.ok:
                self.logger.info(
                    f"Pair {pair.pair_id}: {len(result.inliers)}/{result.num_matches} inliers, "
                    f"mean error {error:.2f} px"
                )
                if cfg.write_overlays:
                    stage = "overlay"
                    write_image(
                        cfg.out / "overlays" / f"{pair.pair_id}.png",
                        render_overlay(fixed.native.image, moving.native.image, result.homography),
                    )
            else:
                self.logger.error(f"Pair {pair.pair_id} failed: {result.status} ({result.message})")
            return PairOutcome(pair.pair_id, pair.category, error, result.status, result.message, counts, result)
        except Exception as e:
            self.logger.error(f"Pair {pair.pair_id} failed at {stage}: {e}")
            return PairOutcome(pair.pair_id, pair.category, math.inf, STATUS_ERROR, f"{stage}: {e}", counts)

    def _register_all(self, manifest: DatasetManifest, params: Optional[DetectorParams]) -> List[PairOutcome]:
        def work(pair: PairEntry) -> PairOutcome:
            outcome = self._register(manifest, pair, params)
            if self.on_pair_complete:
                self.on_pair_complete(outcome)
            return outcome

        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(work, manifest.pairs))
        return [work(pair) for pair in manifest.pairs]

    def provenance(self) -> Dict[str, Any]:
        return {"config_hash": self.config.config_hash(), "seed": self.config.seed, "version": __version__}

    def run(self, manifest: DatasetManifest) -> ScoreReport:
        """Calibrate, register every pair, score and write artifacts.

        Artifacts under ``config.out``: ``report.csv`` (per pair),
        ``summary.json`` (AUCs, calibration, provenance), ``pairs/<id>.json``,
        ``manifest.json`` and, when enabled, ``overlays/<id>.png``.

        Raises:
            ConfigError: invalid configuration or unloadable checkpoint
            DatasetError: the manifest has no pairs
        """
        if not manifest.pairs:
            raise DatasetError("The manifest has no registration pairs")
        cfg = self.config
        self.run_in_progress = True
        if self.on_run_start:
            self.on_run_start(len(manifest.pairs))
        started = time.time()
        try:
            self.descriptor_source()
            self.logger.info(f"Running {cfg.detector.label} on {len(manifest.pairs)} pairs")
            params, calibration = self.calibrate(manifest)
            outcomes = self._register_all(manifest, params)

            statuses = {o.pair_id: o.status for o in outcomes}
            report = aggregate(
                [(o.pair_id, o.category, o.mean_error) for o in outcomes],
                cfg.eval_max_threshold,
                cfg.eval_step,
                statuses,
            )
            counts = [c for o in outcomes if o.num_keypoints is not None for c in o.num_keypoints]
            failed = sum(1 for o in outcomes if o.status != "ok")
            report.metadata.update(self.provenance())
            report.metadata.update({
                "detector": cfg.detector.name,
                "budget": cfg.detector.budget_label,
                "descriptor": self.descriptor_source().name,
                "detector_params": params.to_dict() if params is not None else None,
                "calibration": calibration.to_dict() if calibration is not None else None,
                "avg_keypoints": float(np.mean(counts)) if counts else 0.0,
                "manifest_hash": manifest.manifest_hash(),
                "pair_count": len(outcomes),
                "failed_pairs": failed,
            })
            self.write_artifacts(manifest, report, outcomes)
            self.last_report = report

            message = (
                f"{cfg.detector.label}: FIRE {report.fire:.3f}, Avg {report.avg:.3f}, "
                f"W.Avg {report.weighted_avg:.3f}, {failed} failed pairs "
                f"({format_duration(time.time() - started)})"
            )
            self.logger.info(message)
            if self.on_run_complete:
                self.on_run_complete(failed == 0, message)
            return report
        except KeyregError as e:
            if self.on_run_complete:
                self.on_run_complete(False, str(e))
            raise
        finally:
            self.run_in_progress = False

    def write_artifacts(self, manifest: DatasetManifest, report: ScoreReport, outcomes: Sequence[PairOutcome]) -> None:
        out = self.config.out
        if not ensure_directory(out / "pairs"):
            raise ConfigError(f"Cannot create output directory {out}")
        report.write_csv(out / "report.csv")
        report.write_json(out / "summary.json")
        manifest.save(out / "manifest.json")
        provenance = self.provenance()
        for outcome in outcomes:
            with open(out / "pairs" / f"{outcome.pair_id}.json", "w") as f:
                json.dump({**outcome.to_dict(), **provenance}, f, indent=4, sort_keys=True)

    def run_grid(
        self,
        manifest: DatasetManifest,
        detectors: Sequence[str],
        budgets: Sequence[Optional[int]],
    ) -> List[Dict]:
        """Run every detector at every budget and write ``table.csv`` / ``table.json``.

        Rows come out in detector-major, budget-minor order. Detectors given
        with an explicit ``@budget``, vessel and external keypoints run once.
        The grid baseline skips the unlimited budget. Failed pairs over all runs
        are counted in ``last_grid_failures``.
        """
        rows, done = [], set()
        failed = 0
        for text in detectors:
            for budget in budgets:
                try:
                    spec = DetectorSpec.parse(text, budget)
                except ConfigError as e:
                    if text.startswith("grid") and budget is None:
                        self.logger.warning(f"Skipping {text}@unlimited: {e}")
                        continue
                    raise
                if spec.label in done:
                    continue
                done.add(spec.label)
                sub = ExperimentEngine(
                    replace(self.config, detector=spec, out=self.config.out / spec.slug),
                    self.datasets,
                    self.checkpoints,
                    self.logger,
                )
                sub._source = self._source
                report = sub.run(manifest)
                self._source = sub._source
                failed += int(report.metadata.get("failed_pairs", 0))
                rows.append(table_row(report, spec.name, spec.budget_label, report.metadata["avg_keypoints"]))
        write_table(rows, self.config.out / "table.csv", self.config.out / "table.json")
        self.last_grid_failures = failed
        return rows

    def register_images(self, fixed_path: Path, moving_path: Path) -> RegistrationResult:
        """Register one image pair outside a dataset; writes ``pair.json`` (and an overlay)."""
        cfg = self.config
        fixed_entry = self.datasets.image_entry(fixed_path)
        moving_entry = self.datasets.image_entry(moving_path)
        manifest = DatasetManifest(".", "eval", images=[fixed_entry, moving_entry])
        source = self.descriptor_source()
        params, _ = self.calibrate(manifest)
        fixed = self.load_working(manifest, fixed_entry)
        moving = self.load_working(manifest, moving_entry)
        result = register_pair(
            fixed.native.image,
            moving.native.image,
            params,
            source,
            cfg.register,
            fixed_roi=fixed.native.roi,
            moving_roi=moving.native.roi,
            keypoints=(self.detect(params, fixed), self.detect(params, moving)),
        )
        if not ensure_directory(cfg.out):
            raise ConfigError(f"Cannot create output directory {cfg.out}")
        with open(cfg.out / "pair.json", "w") as f:
            json.dump({**result.to_dict(), **self.provenance()}, f, indent=4, sort_keys=True)
        if result.ok and cfg.write_overlays:
            write_image(cfg.out / "overlay.png", render_overlay(fixed.native.image, moving.native.image, result.homography))
        return result
