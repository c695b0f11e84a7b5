"""
Reporter Module
Human-readable tables and machine-readable JSON reports for the CLI
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from src.boost import AffineAlignment, TilePlan
from src.metrics import METRIC_FIELDS, DatasetReport

logger = logging.getLogger(__name__)

METRIC_LABELS = {
    "abs_rel": "AbsRel",
    "one_minus_delta1_pct": "100(1-d1)",
    "one_minus_delta2_pct": "100(1-d2)",
    "one_minus_delta3_pct": "100(1-d3)",
    "rmse": "RMSE",
    "whdr": "WHDR",
}


class Reporter:
    """Generate reports in table and JSON form"""

    def __init__(self, float_format: str = "{:.4f}"):
        """
        Initialize reporter

        Args:
            float_format: str.format pattern for floats in tables
        """
        self.timestamp = datetime.now().isoformat()
        self.float_format = float_format

    def to_dict(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """Wrap data with the report timestamp"""
        return {
            "timestamp": self.timestamp,
            "data": data,
        }

    def to_json(self, data: Dict[str, Any]) -> str:
        return json.dumps(self.to_dict(data), indent=2, default=str)

    def to_table(self, frame: pd.DataFrame) -> str:
        """
        Render a frame as plain text

        Args:
            frame: Table to print; NaN cells print as "-"

        Returns:
            The formatted table, or "(no rows)" for an empty frame
        """
        if frame.empty:
            return "(no rows)"
        return frame.to_string(
            index=False,
            na_rep="-",
            float_format=lambda v: self.float_format.format(v),
        )

    def eval_frame(self, report: DatasetReport) -> pd.DataFrame:
        """One row per sample plus the mean row"""
        rows = [sample.to_dict() for sample in report.samples]
        if report.aggregate is not None:
            rows.append(report.aggregate.to_dict())
        columns = ["id", *METRIC_FIELDS, "n_valid"]
        frame = pd.DataFrame(rows, columns=columns).astype({name: "float64" for name in METRIC_FIELDS})
        return frame.rename(columns=METRIC_LABELS)

    def tile_frame(self, plan: TilePlan, alignments: Optional[Sequence[AffineAlignment]] = None) -> pd.DataFrame:
        """One row per tile, with the alignment when given"""
        rows = []
        for i, tile in enumerate(plan.tiles):
            row = {"tile": i, **tile.to_dict()}
            if alignments is not None:
                row["s"] = alignments[i].s
                row["o"] = alignments[i].o
            rows.append(row)
        return pd.DataFrame(rows)

    def bench_frame(self, timings: Dict[str, List[float]]) -> pd.DataFrame:
        """Mean and population standard deviation of wall times per image"""
        rows = []
        for image_id, seconds in timings.items():
            series = pd.Series(seconds, dtype="float64")
            rows.append(
                {
                    "id": image_id,
                    "repeats": len(series),
                    "mean_s": float(series.mean()),
                    "std_s": float(series.std(ddof=0)),
                }
            )
        return pd.DataFrame(rows, columns=["id", "repeats", "mean_s", "std_s"])

    def save_report(self, report: Union[str, Dict[str, Any]], file_path: Union[str, Path]) -> Path:
        """
        Save a JSON report to file

        Args:
            report: JSON text or a dict to serialize
            file_path: Path to save report
        """
        path = Path(file_path)
        text = report if isinstance(report, str) else json.dumps(report, indent=2, default=str)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            logger.error("Error saving report to %s: %s", path, e)
            raise
        logger.info("Report saved to %s", path)
        return path
