"""
Metrics Module
Zero-shot evaluation: least-squares alignment in inverse depth, AbsRel,
delta accuracies, RMSE and the ordinal-pair disagreement rate
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.boost import AffineAlignment, solve_alignment
from src.errors import (
    BoundsError,
    DegenerateScaleError,
    EffDepthError,
    EmptyInputError,
    FormatError,
    UnsupportedInputError,
)
from src.grid_core import INVERSE_DEPTH_FLOOR, DepthGrid, depth_to_inverse, inverse_to_depth, joint_mask
from src.io_formats import Manifest, ManifestEntry, load_depth

logger = logging.getLogger(__name__)


class AlignMode(str, Enum):
    LEAST_SQUARES_INVDEPTH = "least_squares"
    NONE = "none"


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    delta_threshold: float = Field(default=1.25, gt=1.0)
    depth_cap: Optional[float] = Field(default=None, gt=0.0)
    align: AlignMode = AlignMode.LEAST_SQUARES_INVDEPTH
    whdr_margin: float = Field(default=0.0, ge=0.0)
    degenerate_variance_eps: float = Field(default=1e-12, ge=0.0)


class Relation(str, Enum):
    A_CLOSER = "A_CLOSER"
    B_CLOSER = "B_CLOSER"


@dataclass(frozen=True)
class OrdinalPair:
    """Two pixel coordinates (x, y) and which of them is closer"""

    a: Tuple[int, int]
    b: Tuple[int, int]
    relation: Relation

    def __post_init__(self):
        object.__setattr__(self, "a", (int(self.a[0]), int(self.a[1])))
        object.__setattr__(self, "b", (int(self.b[0]), int(self.b[1])))
        object.__setattr__(self, "relation", Relation(self.relation))
        if self.a == self.b:
            raise UnsupportedInputError(f"ordinal pair endpoints coincide at {self.a}")


def parse_pairs(data: Union[str, bytes]) -> List[OrdinalPair]:
    """JSON list of {"a": [x, y], "b": [x, y], "relation": "A_CLOSER" | "B_CLOSER"}"""
    try:
        raw = json.loads(data)
    except (ValueError, RecursionError) as e:
        raise FormatError(f"malformed pair labels: {e}") from None
    if not isinstance(raw, list):
        raise FormatError("pair labels must be a JSON list")
    pairs = []
    for i, item in enumerate(raw):
        try:
            pairs.append(OrdinalPair(tuple(item["a"]), tuple(item["b"]), item["relation"]))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise FormatError(f"pair {i}: {e}") from None
    return pairs


def load_pairs(path: Union[str, Path]) -> List[OrdinalPair]:
    """Read ordinal pair labels from a JSON file"""
    return parse_pairs(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Per-sample metrics

def scoring_mask(gt: DepthGrid, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None) -> np.ndarray:
    """
    GT pixels that take part in alignment and scoring

    Args:
        gt: Ground truth in inverse depth
        cfg: Evaluation settings; its depth_cap applies when depth_cap is None
        depth_cap: Per-sample cap on GT depth

    Returns:
        Boolean H x W mask: valid, positive, and within the cap
    """
    cfg = cfg or EvalConfig()
    values = gt.values.astype(np.float64)
    mask = gt.valid_mask & (values > 0)
    cap = depth_cap if depth_cap is not None else cfg.depth_cap
    if cap is not None:
        mask &= inverse_to_depth(np.where(mask, values, 1.0)) <= cap
    return mask


def _capped(gt: DepthGrid, cfg: EvalConfig, depth_cap: Optional[float]) -> DepthGrid:
    return gt.with_mask(scoring_mask(gt, cfg, depth_cap))


def _align(pred: DepthGrid, gt: DepthGrid, cfg: EvalConfig) -> Tuple[DepthGrid, Optional[AffineAlignment]]:
    if cfg.align is AlignMode.NONE:
        return pred, None
    joint = joint_mask(pred, gt)
    if joint.sum() < 2:
        raise EmptyInputError("alignment needs at least two jointly valid pixels")
    alignment = solve_alignment(gt, pred, eps=cfg.degenerate_variance_eps)
    if alignment.degenerate:
        raise DegenerateScaleError("prediction is constant over the valid pixels")
    aligned = alignment.apply(pred)
    valid = aligned.valid_mask
    values = aligned.values.astype(np.float64)
    values[valid] = np.maximum(values[valid], INVERSE_DEPTH_FLOOR)
    return aligned.with_values(values), alignment


def align_prediction(
    pred: DepthGrid, gt: DepthGrid, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None
) -> DepthGrid:
    """
    Least-squares scale/shift of pred onto gt in inverse depth, floored above zero

    Pixels whose GT depth exceeds the cap do not take part in the fit.

    Args:
        pred: Relative prediction in inverse depth
        gt: Ground truth in inverse depth
        cfg: Evaluation settings
        depth_cap: Per-sample cap overriding cfg.depth_cap

    Returns:
        The aligned prediction over the whole grid
    """
    cfg = cfg or EvalConfig()
    aligned, _ = _align(pred, _capped(gt, cfg, depth_cap), cfg)
    return aligned


def _depths(
    pred: DepthGrid, gt: DepthGrid, cfg: EvalConfig, depth_cap: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    valid = joint_mask(pred, gt) & scoring_mask(gt, cfg, depth_cap)
    depth_gt = inverse_to_depth(gt.values[valid])
    depth_pred = inverse_to_depth(pred.values[valid])
    if depth_gt.size == 0:
        raise EmptyInputError("no valid pixels left for evaluation")
    return depth_pred, depth_gt


def abs_rel(pred_aligned: DepthGrid, gt: DepthGrid, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None) -> float:
    """
    Mean |pred - gt| / gt in depth space

    Args:
        pred_aligned: Prediction in inverse depth, already aligned
        gt: Ground truth in inverse depth
        cfg: Evaluation settings
        depth_cap: Per-sample cap overriding cfg.depth_cap

    Returns:
        AbsRel over the jointly valid pixels within the cap

    Raises:
        EmptyInputError: If no pixel is left to score
    """
    depth_pred, depth_gt = _depths(pred_aligned, gt, cfg or EvalConfig(), depth_cap)
    return float(np.mean(np.abs(depth_pred - depth_gt) / depth_gt))


def delta_accuracy(
    pred_aligned: DepthGrid, gt: DepthGrid, threshold: float, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None
) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) strictly below threshold"""
    depth_pred, depth_gt = _depths(pred_aligned, gt, cfg or EvalConfig(), depth_cap)
    ratio = np.maximum(depth_pred / depth_gt, depth_gt / depth_pred)
    return float(np.mean(ratio < threshold))


def delta1(pred_aligned: DepthGrid, gt: DepthGrid, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None) -> float:
    """Reported as 100 * (1 - delta_1)"""
    cfg = cfg or EvalConfig()
    return 100.0 * (1.0 - delta_accuracy(pred_aligned, gt, cfg.delta_threshold, cfg, depth_cap))


def rmse(pred_aligned: DepthGrid, gt: DepthGrid, cfg: Optional[EvalConfig] = None, depth_cap: Optional[float] = None) -> float:
    """Root mean squared depth error over the scored pixels"""
    depth_pred, depth_gt = _depths(pred_aligned, gt, cfg or EvalConfig(), depth_cap)
    return float(np.sqrt(np.mean((depth_pred - depth_gt) ** 2)))


def _inverse_at(pred: DepthGrid, point: Tuple[int, int]) -> float:
    x, y = point
    if not (0 <= x < pred.width and 0 <= y < pred.height):
        raise BoundsError(f"pair coordinate {point} outside {pred.width}x{pred.height} grid")
    if not pred.valid_mask[y, x]:
        raise UnsupportedInputError(f"pair coordinate {point} is an invalid pixel")
    return float(pred.values[y, x])


def predicted_relation(pred: DepthGrid, pair: OrdinalPair, margin: float = 0.0) -> Optional[Relation]:
    """Relation implied by pred, None when the two points count as equal"""
    va = _inverse_at(pred, pair.a)
    vb = _inverse_at(pred, pair.b)
    if va - vb > margin * abs(vb):
        return Relation.A_CLOSER
    if vb - va > margin * abs(va):
        return Relation.B_CLOSER
    return None


def whdr(pred: DepthGrid, pairs: Sequence[OrdinalPair], cfg: Optional[EvalConfig] = None) -> float:
    """
    Share of ordinal pairs whose predicted ordering disagrees with the label

    Args:
        pred: Prediction in inverse depth (larger is closer)
        pairs: Labelled point pairs
        cfg: Evaluation settings; whdr_margin sets the relative band within
            which two points count as equal

    Returns:
        Unweighted disagreement rate in [0, 1]; equal points always disagree

    Raises:
        EmptyInputError: If pairs is empty
        BoundsError: If a pair coordinate lies outside the grid
    """
    cfg = cfg or EvalConfig()
    if not pairs:
        raise EmptyInputError("no ordinal pairs to evaluate")
    wrong = sum(predicted_relation(pred, pair, cfg.whdr_margin) is not pair.relation for pair in pairs)
    return wrong / len(pairs)


# ---------------------------------------------------------------------------
# Reports

@dataclass
class MetricsReport:
    """Per-sample (or aggregate) metrics; depth metrics are None for pair-only samples"""

    sample_id: str
    abs_rel: Optional[float] = None
    one_minus_delta1_pct: Optional[float] = None
    one_minus_delta2_pct: Optional[float] = None
    one_minus_delta3_pct: Optional[float] = None
    rmse: Optional[float] = None
    whdr: Optional[float] = None
    n_valid: int = 0
    n_pairs: int = 0
    alignment: Optional[AffineAlignment] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.sample_id,
            "abs_rel": self.abs_rel,
            "one_minus_delta1_pct": self.one_minus_delta1_pct,
            "one_minus_delta2_pct": self.one_minus_delta2_pct,
            "one_minus_delta3_pct": self.one_minus_delta3_pct,
            "rmse": self.rmse,
            "whdr": self.whdr,
            "n_valid": self.n_valid,
            "n_pairs": self.n_pairs,
            "alignment": None if self.alignment is None else self.alignment.to_dict(),
        }


METRIC_FIELDS = (
    "abs_rel",
    "one_minus_delta1_pct",
    "one_minus_delta2_pct",
    "one_minus_delta3_pct",
    "rmse",
    "whdr",
)


@dataclass(frozen=True)
class SampleError:
    sample_id: str
    message: str

    def to_dict(self) -> Dict[str, str]:
        return {"id": self.sample_id, "error": self.message}


@dataclass
class DatasetReport:
    samples: List[MetricsReport] = field(default_factory=list)
    aggregate: Optional[MetricsReport] = None
    errors: List[SampleError] = field(default_factory=list)

    @property
    def partial_failure(self) -> bool:
        return bool(self.errors)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": [s.to_dict() for s in self.samples],
            "aggregate": None if self.aggregate is None else self.aggregate.to_dict(),
            "errors": [e.to_dict() for e in self.errors],
        }


def evaluate_grids(
    pred: DepthGrid,
    gt: Optional[DepthGrid],
    pairs: Optional[Sequence[OrdinalPair]] = None,
    cfg: Optional[EvalConfig] = None,
    sample_id: str = "sample",
    depth_cap: Optional[float] = None,
) -> MetricsReport:
    """
    Evaluate one prediction against depth ground truth, ordinal pairs or both

    The depth cap is applied to the ground truth first, so far pixels take
    no part in the alignment either. WHDR uses the unaligned prediction.

    Args:
        pred: Prediction in inverse depth
        gt: Ground truth in inverse depth, or None for pair-only samples
        pairs: Ordinal labels, or None
        cfg: Evaluation settings
        sample_id: Id stored in the report
        depth_cap: Per-sample cap overriding cfg.depth_cap

    Returns:
        MetricsReport; metrics without labels stay None
    """
    cfg = cfg or EvalConfig()
    report = MetricsReport(sample_id=sample_id)
    if gt is not None:
        gt = _capped(gt, cfg, depth_cap)
        aligned, alignment = _align(pred, gt, cfg)
        depth_pred, depth_gt = _depths(aligned, gt, cfg, depth_cap)
        ratio = np.maximum(depth_pred / depth_gt, depth_gt / depth_pred)
        t = cfg.delta_threshold
        report.abs_rel = float(np.mean(np.abs(depth_pred - depth_gt) / depth_gt))
        report.one_minus_delta1_pct = 100.0 * (1.0 - float(np.mean(ratio < t)))
        report.one_minus_delta2_pct = 100.0 * (1.0 - float(np.mean(ratio < t ** 2)))
        report.one_minus_delta3_pct = 100.0 * (1.0 - float(np.mean(ratio < t ** 3)))
        report.rmse = float(np.sqrt(np.mean((depth_pred - depth_gt) ** 2)))
        report.n_valid = int(depth_gt.size)
        report.alignment = alignment
    if pairs:
        report.whdr = whdr(pred, pairs, cfg)
        report.n_pairs = len(pairs)
    return report


def evaluate_sample(entry: ManifestEntry, manifest: Manifest, cfg: Optional[EvalConfig] = None) -> MetricsReport:
    """Load one manifest entry's files and evaluate them"""
    cfg = cfg or EvalConfig()
    pred = load_depth(manifest.resolve(entry.pred_path))
    gt = None
    if entry.gt_path is not None:
        gt = load_depth(manifest.resolve(entry.gt_path))
        if entry.gt_space == "depth":
            gt = DepthGrid.from_array(depth_to_inverse(gt.values), gt.valid_mask)
    pairs = load_pairs(manifest.resolve(entry.pairs_path)) if entry.pairs_path is not None else None
    return evaluate_grids(pred, gt, pairs, cfg, sample_id=entry.id, depth_cap=entry.depth_cap)


def aggregate_reports(reports: Sequence[MetricsReport], sample_id: str = "mean") -> MetricsReport:
    """Unweighted per-sample mean of every metric present"""
    out = MetricsReport(sample_id=sample_id)
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            setattr(out, name, math.fsum(values) / len(values))
    out.n_valid = sum(r.n_valid for r in reports)
    out.n_pairs = sum(r.n_pairs for r in reports)
    return out


def evaluate_dataset(manifest: Manifest, cfg: Optional[EvalConfig] = None, jobs: int = 1) -> DatasetReport:
    """
    Evaluate every manifest entry

    Args:
        manifest: Dataset manifest
        cfg: Evaluation settings
        jobs: Worker threads; samples are independent

    Returns:
        DatasetReport with per-sample reports in manifest order, their
        unweighted mean and one error record per failed sample

    Raises:
        ManifestError: If an entry has no prediction or no labels
    """
    cfg = cfg or EvalConfig()
    manifest.validate_for_evaluation()

    def run(entry: ManifestEntry):
        try:
            return evaluate_sample(entry, manifest, cfg)
        except (EffDepthError, OSError) as e:
            logger.warning("sample '%s' failed: %s", entry.id, e)
            return SampleError(entry.id, str(e))

    if jobs > 1 and len(manifest.entries) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, manifest.entries))
    else:
        outcomes = [run(entry) for entry in manifest.entries]

    report = DatasetReport()
    for outcome in outcomes:
        if isinstance(outcome, SampleError):
            report.errors.append(outcome)
        else:
            report.samples.append(outcome)
    if report.samples:
        report.aggregate = aggregate_reports(report.samples)
    logger.info("evaluated %d sample(s), %d failed", len(report.samples), len(report.errors))
    return report
