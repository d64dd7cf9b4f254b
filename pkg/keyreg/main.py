"""Main entry point for the keyreg command line."""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

from . import __version__
from .checkpoint_manager import CheckpointManager
from .config_manager import ConfigManager, parse_budget
from .dataset_manager import DatasetManager, DatasetManifest
from .errors import ConfigError, DatasetError, KeyregError
from .evaluate import write_table
from .experiment_engine import ExperimentConfig, ExperimentEngine
from .synthetic import write_fire_dataset, write_training_folder
from .trainer import DescriptorTrainer
from .utils import setup_logging

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_PARTIAL = 4

DEFAULT_GRID_DETECTORS = ("harris", "fast", "orb", "dog", "censure")
DEFAULT_GRID_BUDGETS = ("100", "500", "1000", "unlimited")

# Flags whose values map onto config keys of the same name.
_OVERRIDE_KEYS = (
    "detector", "budget", "sensitivity", "nms_radius", "vessel_kp", "gray_mode", "external_native",
    "checkpoint", "patch_size", "working_size", "roi_margin", "ransac_threshold", "ransac_max_iterations",
    "ransac_confidence", "ransac_min_inliers", "eval_max_threshold", "eval_step", "seed", "workers",
    "out", "gt_order", "log_level", "write_overlays", "logit_scale", "logit_offset", "train_preset",
    "train_epochs", "train_learning_rate", "train_image_size",
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_detection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--detector", help="e.g. harris, logits:censure, grid, external")
    p.add_argument("--budget", help="100, 500, 1000, 5000, 40000 or unlimited")
    p.add_argument("--sensitivity", type=float, help="skip calibration and use this threshold")
    p.add_argument("--nms-radius", dest="nms_radius", type=float)
    p.add_argument("--vessel-kp", dest="vessel_kp",
                   help="all, skeleton, canny, skeleton+canny or subsample:K")
    p.add_argument("--gray-mode", dest="gray_mode", choices=["green", "luma"])
    p.add_argument("--working-size", dest="working_size", type=int)
    p.add_argument("--roi-margin", dest="roi_margin", type=int)
    p.add_argument("--external-native", dest="external_native", action="store_true", default=None,
                   help="external keypoint files are in native pixels")
    p.add_argument("--logit-scale", dest="logit_scale", type=float)
    p.add_argument("--logit-offset", dest="logit_offset", type=float)


def _add_registration(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="trained descriptor checkpoint; patch descriptors otherwise")
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--ransac-threshold", dest="ransac_threshold", type=float)
    p.add_argument("--ransac-max-iterations", dest="ransac_max_iterations", type=int)
    p.add_argument("--ransac-confidence", dest="ransac_confidence", type=float)
    p.add_argument("--ransac-min-inliers", dest="ransac_min_inliers", type=int)
    p.add_argument("--overlays", dest="write_overlays", action="store_true", default=None)


def _add_dataset(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", type=Path, help="FIRE-layout dataset root")
    src.add_argument("--manifest", type=Path, help="manifest.json written by an earlier run")
    p.add_argument("--gt-order", dest="gt_order", choices=["fixed-first", "moving-first"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keyreg",
        description="Keypoint-based registration of retinal fundus images",
    )
    parser.add_argument("--version", action="version", version=f"keyreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a dense descriptor network")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True, help="folder of training images")
    p.add_argument("--preset", dest="train_preset", choices=["paper", "desk"])
    p.add_argument("--epochs", dest="train_epochs", type=int)
    p.add_argument("--lr", dest="train_learning_rate", type=float)
    p.add_argument("--image-size", dest="train_image_size", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("calibrate", help="find the detector sensitivity for a keypoint budget")
    _add_common(p)
    _add_dataset(p)
    _add_detection(p)

    p = sub.add_parser("register", help="register one image pair")
    _add_common(p)
    _add_detection(p)
    _add_registration(p)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)

    p = sub.add_parser("evaluate", help="register and score a dataset")
    _add_common(p)
    _add_dataset(p)
    _add_detection(p)
    _add_registration(p)
    p.add_argument("--eval-max-threshold", dest="eval_max_threshold", type=float)
    p.add_argument("--eval-step", dest="eval_step", type=float)
    p.add_argument("--grid", nargs="*", metavar="DETECTOR",
                   help="run a detector x budget grid (default detectors when none are listed)")
    p.add_argument("--budgets", nargs="+", help="budgets of the grid")

    p = sub.add_parser("report", help="merge experiment summaries into one table")
    _add_common(p)
    p.add_argument("summaries", nargs="+", type=Path, help="summary.json files or run directories")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["fire", "train"], default="fire")
    p.add_argument("--count", type=int, default=2, help="pairs per category (fire) or images (train)")
    p.add_argument("--size", type=int, default=256)
    return parser


class KeyregApp:
    """Command-line application."""

    def __init__(self, args: argparse.Namespace):
        """Initialize the application.

        Args:
            args: Parsed command-line arguments

        Raises:
            ConfigError: invalid configuration file or flag values
        """
        self.args = args
        self.config = ConfigManager(args.config)
        overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if hasattr(args, k)}
        self.config.apply_overrides(overrides)

        self.out = Path(self.config.get("out"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.logger = setup_logging(self.config.get("log_level"), self.out / "keyreg.log")
        self.logger.info("=" * 50)
        self.logger.info(f"keyreg {__version__}: {args.command}")

        self.datasets = DatasetManager(self.logger)
        self.checkpoints = CheckpointManager(self.logger)

    def run(self) -> int:
        """Run the selected command and return its exit code."""
        handler = getattr(self, f"cmd_{self.args.command}")
        return handler()

    def _manifest(self) -> DatasetManifest:
        if getattr(self.args, "manifest", None) is not None:
            return DatasetManifest.load(self.args.manifest)
        return self.datasets.load_fire(self.args.dataset, self.config.get("gt_order"))

    def _engine(self) -> ExperimentEngine:
        return ExperimentEngine(
            ExperimentConfig.from_config_manager(self.config), self.datasets, self.checkpoints, self.logger
        )

    def _write_json(self, name: str, data: Dict) -> Path:
        path = self.out / name
        with open(path, "w") as f:
            json.dump(data, f, indent=4, sort_keys=True)
        return path

    def cmd_train(self) -> int:
        manifest = self.datasets.load_image_folder(self.args.dataset)
        cfg = self.config.train_config()
        self._write_json("train_manifest.json", {
            "dataset": manifest.to_dict(),
            "manifest_hash": manifest.manifest_hash(),
            "train_config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "version": __version__,
        })
        data = []
        for entry in manifest.images:
            loaded = self.datasets.load_entry(manifest, entry)
            data.append((loaded.image, loaded.roi))
        params = self.checkpoints.load(self.args.resume) if self.args.resume else None

        trainer = DescriptorTrainer(cfg, self.out, self.checkpoints, self.logger)
        trainer.train(data, params)
        first, last = trainer.epoch_losses[0], trainer.epoch_losses[-1]
        self.logger.info(f"Loss went from {first:.4f} to {last:.4f}; checkpoint in {self.out}")
        return EXIT_OK

    def cmd_calibrate(self) -> int:
        engine = self._engine()
        params, result = engine.calibrate(self._manifest())
        self._write_json("calibration.json", {
            "detector": engine.config.detector.label,
            "detector_params": params.to_dict() if params is not None else None,
            "calibration": result.to_dict() if result is not None else None,
            **engine.provenance(),
        })
        if result is not None:
            print(f"{engine.config.detector.label}: sensitivity {result.sensitivity:.6g}, "
                  f"mean {result.achieved_mean:.1f} keypoints"
                  + (" (target unreachable)" if result.unreachable else ""))
        return EXIT_OK

    def cmd_register(self) -> int:
        engine = self._engine()
        result = engine.register_images(self.args.fixed, self.args.moving)
        if not result.ok:
            self.logger.error(f"Registration failed: {result.status} ({result.message})")
            return EXIT_PARTIAL
        print(json.dumps(result.homography.to_list()))
        return EXIT_OK

    def cmd_evaluate(self) -> int:
        engine = self._engine()
        manifest = self._manifest()
        if self.args.grid is not None:
            detectors = self.args.grid or list(DEFAULT_GRID_DETECTORS)
            budgets = [parse_budget(b) for b in (self.args.budgets or DEFAULT_GRID_BUDGETS)]
            rows = engine.run_grid(manifest, detectors, budgets)
            for row in rows:
                print(f"{row['detector']:>16} {row['budget']:>9}  FIRE {row['FIRE']:.3f}  W.Avg {row['W.Avg']:.3f}")
            return EXIT_PARTIAL if engine.last_grid_failures else EXIT_OK

        report = engine.run(manifest)
        print(json.dumps({k: report.to_dict()[k] for k in ("FIRE", "A", "P", "S", "Avg", "W.Avg")}, sort_keys=True))
        return EXIT_PARTIAL if report.metadata.get("failed_pairs") else EXIT_OK

    def cmd_report(self) -> int:
        rows = []
        for path in self.args.summaries:
            path = path / "summary.json" if path.is_dir() else path
            try:
                with open(path) as f:
                    summary = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise DatasetError(f"Cannot read summary {path}: {e}") from e
            meta = summary.get("metadata", {})
            row = {
                "detector": meta.get("detector", path.parent.name),
                "budget": meta.get("budget", ""),
                "avg_keypoints": round(float(meta.get("avg_keypoints", 0.0)), 1),
            }
            row.update({k: summary.get(k) for k in ("FIRE", "A", "P", "S", "Avg", "W.Avg")})
            rows.append(row)
        write_table(rows, self.out / "table.csv", self.out / "table.json")
        self.logger.info(f"Wrote {len(rows)} rows to {self.out / 'table.csv'}")
        return EXIT_OK

    def cmd_synth(self) -> int:
        if self.args.count < 1 or self.args.size < 32:
            raise ConfigError("synth needs --count >= 1 and --size >= 32")
        seed = int(self.config.get("seed"))
        if self.args.kind == "fire":
            write_fire_dataset(self.out, self.args.count, self.args.size, seed)
        else:
            write_training_folder(self.out, self.args.count, self.args.size, seed)
        return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        return KeyregApp(args).run()
    except ConfigError as e:
        print(f"keyreg: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as e:
        print(f"keyreg: dataset error: {e}", file=sys.stderr)
        return EXIT_DATASET
    except KeyregError as e:
        print(f"keyreg: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
    except Exception as e:
        print(f"keyreg: unexpected error: {e!r}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
