"""Structured check results and their CSV / JSON serialization."""
import csv
import json
import math
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


def format_number(value: float) -> str:
    """Deterministic text form of a float (repr keeps every digit)."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return repr(float(value))


class CheckRow(BaseModel):
    """One reported quantity with its error estimate, tolerance and verdict."""

    label: str
    value: float
    error_estimate: float = 0.0
    tolerance: float = math.inf
    passed: bool = True
    extra: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def bound(
        cls,
        label: str,
        value: float,
        tolerance: float,
        error_estimate: float = 0.0,
        **extra: float,
    ) -> "CheckRow":
        """Row that passes when |value| <= tolerance."""
        passed = bool(math.isfinite(value) and abs(value) <= tolerance)
        return cls(
            label=label,
            value=value,
            error_estimate=error_estimate,
            tolerance=tolerance,
            passed=passed,
            extra=dict(extra),
        )

    @classmethod
    def info(cls, label: str, value: float, error_estimate: float = 0.0, **extra: float) -> "CheckRow":
        """Row carrying a value without a pass criterion."""
        return cls(label=label, value=value, error_estimate=error_estimate, extra=dict(extra))


class Report(BaseModel):
    """Rows of one command run plus run metadata."""

    command: str
    rows: List[CheckRow] = Field(default_factory=list)
    metadata: Dict[str, str] = Field(default_factory=dict)

    def add(self, row: CheckRow) -> CheckRow:
        self.rows.append(row)
        return row

    def extend(self, other: "Report", prefix: Optional[str] = None) -> None:
        for row in other.rows:
            label = f"{prefix}:{row.label}" if prefix else row.label
            self.rows.append(row.model_copy(update={"label": label}))

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    @property
    def failures(self) -> List[CheckRow]:
        return [row for row in self.rows if not row.passed]

    def row(self, label: str) -> CheckRow:
        """First row with the given label.

        Raises:
            KeyError: If no row carries the label.
        """
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def worst_residual(self) -> float:
        """Largest |value| / tolerance over rows with a finite tolerance."""
        ratios = [
            abs(r.value) / r.tolerance
            for r in self.rows
            if math.isfinite(r.tolerance) and r.tolerance > 0
        ]
        return max(ratios) if ratios else 0.0

    def summary(self) -> Dict[str, object]:
        """JSON summary {command, pass, counts, worst_residual}."""
        return {
            "command": self.command,
            "pass": self.passed,
            "counts": {
                "rows": len(self.rows),
                "passed": sum(1 for r in self.rows if r.passed),
                "failed": len(self.failures),
            },
            "worst_residual": self.worst_residual(),
        }

    def extra_columns(self) -> List[str]:
        return sorted({key for r in self.rows for key in r.extra})

    def write_csv(self, path: Path) -> Path:
        extras = self.extra_columns()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["label", "value", "error_estimate", "tolerance", "pass", *extras])
            for r in self.rows:
                writer.writerow(
                    [
                        r.label,
                        format_number(r.value),
                        format_number(r.error_estimate),
                        format_number(r.tolerance),
                        "1" if r.passed else "0",
                        *[format_number(r.extra[k]) if k in r.extra else "" for k in extras],
                    ]
                )
        return path

    def write(self, out_dir: Path) -> Dict[str, Path]:
        """Write ``<command>.csv`` and ``<command>.json`` into ``out_dir``.

        Returns:
            Dict: Paths of the written files.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.write_csv(out_dir / f"{self.command}.csv")
        json_path = out_dir / f"{self.command}.json"
        summary = self.summary()
        summary["metadata"] = dict(sorted(self.metadata.items()))
        with open(json_path, "w") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return {"csv": csv_path, "json": json_path}
