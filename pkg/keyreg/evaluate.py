"""Registration Score AUC and per-category report aggregation."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegeneratePoint, EmptyErrorList, UnknownCategory
from .imagecore import Homography, apply_homography_points

logger = logging.getLogger(__name__)

CATEGORIES = ("A", "P", "S")
CSV_THRESHOLDS = (5, 10, 25)
TABLE_COLUMNS = ("detector", "budget", "avg_keypoints", "FIRE", "A", "P", "S", "Avg", "W.Avg")


@dataclass(frozen=True, eq=False)
class ControlPointSet:
    """Ground-truth correspondences of one pair in native pixels.

    ``fixed[i]`` and ``moving[i]`` are the same anatomical point.
    """

    pair_id: str
    category: str
    fixed: np.ndarray
    moving: np.ndarray

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise UnknownCategory(f"Pair {self.pair_id}: unknown category '{self.category}'")
        fixed = np.asarray(self.fixed, dtype=np.float64).reshape(-1, 2)
        moving = np.asarray(self.moving, dtype=np.float64).reshape(-1, 2)
        if len(fixed) == 0 or len(fixed) != len(moving):
            raise ValueError(f"Pair {self.pair_id}: need >= 1 correspondence on both sides")
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "moving", moving)

    def __len__(self) -> int:
        return len(self.fixed)


def pair_error(h: Optional[Homography], cps: ControlPointSet) -> float:
    """Mean Euclidean distance between H(moving) and fixed control points.

    A missing homography or a control point mapped to infinity gives +inf.
    """
    if h is None:
        return math.inf
    try:
        mapped = apply_homography_points(h, cps.moving)
    except DegeneratePoint:
        return math.inf
    return float(np.mean(np.linalg.norm(mapped - cps.fixed, axis=1)))


def threshold_grid(max_threshold: float = 25.0, step: float = 1.0) -> np.ndarray:
    """Thresholds ``step, 2 step, ..., max_threshold``."""
    if max_threshold <= 0 or step <= 0:
        raise ValueError("max_threshold and step must be > 0")
    n = int(math.floor(max_threshold / step + 1e-9))
    if n < 1:
        raise ValueError("step is larger than max_threshold")
    return step * np.arange(1, n + 1, dtype=np.float64)


def success_curve(errors: Sequence[float], thresholds: np.ndarray) -> np.ndarray:
    """Fraction of pairs with error <= t for every threshold t."""
    errs = np.asarray(errors, dtype=np.float64)
    errs = np.where(np.isnan(errs), np.inf, errs)
    return (errs[None, :] <= thresholds[:, None]).mean(axis=1)


def registration_score(errors: Sequence[float], max_threshold: float = 25.0, step: float = 1.0) -> float:
    """Area under the success-rate curve on the unit threshold grid, in [0, 1].

    Raises:
        EmptyErrorList: no errors given
    """
    if len(errors) == 0:
        raise EmptyErrorList("Registration score needs at least one pair error")
    return float(success_curve(errors, threshold_grid(max_threshold, step)).mean())


def summarize_categories(aucs: Dict[str, float], counts: Dict[str, int]) -> Tuple[float, float]:
    """Unweighted and pair-count-weighted mean of category AUCs.

    Returns:
        (Avg, W.Avg)
    """
    present = [c for c in CATEGORIES if c in aucs and counts.get(c, 0) > 0]
    if not present:
        raise EmptyErrorList("No category has any pairs")
    avg = float(np.mean([aucs[c] for c in present]))
    total = sum(counts[c] for c in present)
    wavg = float(sum(counts[c] * aucs[c] for c in present) / total)
    return avg, wavg


@dataclass
class PairScore:
    pair_id: str
    category: str
    mean_error: float
    status: str = "ok"


@dataclass
class ScoreReport:
    """Per-pair errors with per-category, averaged and overall AUCs."""

    pairs: List[PairScore]
    thresholds: List[float]
    category_auc: Dict[str, float]
    category_counts: Dict[str, int]
    avg: float
    weighted_avg: float
    overall_auc: float
    metadata: Dict = field(default_factory=dict)

    @property
    def fire(self) -> float:
        """The pair-weighted "FIRE" column: the AUC over all pairs."""
        return self.overall_auc

    @property
    def divergence(self) -> float:
        return abs(self.overall_auc - self.weighted_avg)

    def to_dict(self) -> Dict:
        return {
            "FIRE": self.fire,
            "A": self.category_auc.get("A"),
            "P": self.category_auc.get("P"),
            "S": self.category_auc.get("S"),
            "Avg": self.avg,
            "W.Avg": self.weighted_avg,
            "category_counts": dict(self.category_counts),
            "thresholds": {"max": self.thresholds[-1], "step": self.thresholds[0], "count": len(self.thresholds)},
            "fire_weighted_divergence": self.divergence,
            "failed_pairs": sum(1 for p in self.pairs if p.status != "ok"),
            "metadata": dict(self.metadata),
        }

    def write_csv(self, path: Path) -> None:
        """Per-pair rows: ``pair,category,mean_error,success@5,success@10,success@25``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["pair", "category", "mean_error"] + [f"success@{t}" for t in CSV_THRESHOLDS])
            for p in self.pairs:
                err = p.mean_error
                writer.writerow(
                    [p.pair_id, p.category, "inf" if math.isinf(err) else f"{err:.6f}"]
                    + [int(err <= t) for t in CSV_THRESHOLDS]
                )

    def write_json(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4, sort_keys=True)


def aggregate(
    per_pair: Sequence[Tuple[str, str, float]],
    max_threshold: float = 25.0,
    step: float = 1.0,
    statuses: Optional[Dict[str, str]] = None,
) -> ScoreReport:
    """Build a ScoreReport from (pair id, category, mean error) triples.

    Failed pairs should carry error +inf. Pairs are reported in id order.

    Raises:
        UnknownCategory: a category outside {A, P, S}
        EmptyErrorList: no pairs
    """
    if not per_pair:
        raise EmptyErrorList("No pairs to aggregate")
    statuses = statuses or {}
    rows = sorted(per_pair, key=lambda r: r[0])
    for pair_id, category, _ in rows:
        if category not in CATEGORIES:
            raise UnknownCategory(f"Pair {pair_id}: unknown category '{category}'")
    grid = threshold_grid(max_threshold, step)

    aucs: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for c in CATEGORIES:
        errs = [e for _, cat, e in rows if cat == c]
        counts[c] = len(errs)
        if errs:
            aucs[c] = registration_score(errs, max_threshold, step)
    avg, wavg = summarize_categories(aucs, counts)
    overall = registration_score([e for _, _, e in rows], max_threshold, step)

    pairs = [PairScore(pid, cat, float(err), statuses.get(pid, "ok" if math.isfinite(err) else "error"))
             for pid, cat, err in rows]
    report = ScoreReport(pairs, grid.tolist(), aucs, counts, avg, wavg, overall)
    if report.divergence > step / max_threshold:
        logger.warning(f"FIRE column {overall:.4f} diverges from W.Avg {wavg:.4f}")
    return report


def table_row(report: ScoreReport, detector: str, budget: str, avg_keypoints: float) -> Dict:
    """One row of the detector x budget comparison table."""
    row = {"detector": detector, "budget": budget, "avg_keypoints": round(float(avg_keypoints), 1)}
    row.update({k: report.to_dict()[k] for k in ("FIRE", "A", "P", "S", "Avg", "W.Avg")})
    return row


def write_table(rows: Sequence[Dict], csv_path: Path, json_path: Optional[Path] = None) -> None:
    """Write comparison rows as CSV (columns ``TABLE_COLUMNS``) and optionally JSON."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TABLE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in TABLE_COLUMNS])
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(list(rows), f, indent=4, sort_keys=True)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)
