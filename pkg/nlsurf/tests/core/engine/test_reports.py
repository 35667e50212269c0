"""Tests for reports.py module."""
import json
import math

import pytest

from nlsurf.core.engine.reports import CheckRow, Report, format_number


class TestFormatNumber:
    """Test class for format_number."""

    def test_values(self):
        """Test nan, booleans and full-precision floats."""
        assert format_number(math.nan) == "nan"
        assert format_number(True) == "1"
        assert format_number(0.1) == "0.1"
        assert float(format_number(1.0 / 3.0)) == 1.0 / 3.0


class TestCheckRow:
    """Test class for CheckRow."""

    def test_bound(self):
        """Test the |value| <= tolerance verdict."""
        assert CheckRow.bound("a", -0.5, 0.5).passed
        assert not CheckRow.bound("a", 0.6, 0.5).passed
        assert not CheckRow.bound("a", math.nan, 0.5).passed

    def test_info(self):
        """Test info rows always pass and keep their extras."""
        row = CheckRow.info("b", 3.0, 0.1, x1=0.5)
        assert row.passed
        assert row.tolerance == math.inf
        assert row.extra == {"x1": 0.5}


class TestReport:
    """Test class for Report."""

    def setup_method(self):
        """Build a report with one passing and one failing row."""
        self.report = Report(command="identity", metadata={"s": "0.5"})
        self.report.add(CheckRow.bound("residual[0]", 1e-4, 1e-3, 1e-6, x1=0.0))
        self.report.add(CheckRow.bound("residual[0.2]", 2e-3, 1e-3, x1=0.2, x2=0.1))

    def test_verdicts(self):
        """Test pass, failures and the worst residual."""
        assert not self.report.passed
        assert [r.label for r in self.report.failures] == ["residual[0.2]"]
        assert self.report.worst_residual() == pytest.approx(2.0)

    def test_row_lookup(self):
        """Test rows are found by label."""
        assert self.report.row("residual[0]").value == 1e-4
        with pytest.raises(KeyError):
            self.report.row("missing")

    def test_extend_with_prefix(self):
        """Test merged rows carry the prefix."""
        merged = Report(command="decomposition")
        merged.extend(self.report, prefix="p0")
        assert [r.label for r in merged.rows] == ["p0:residual[0]", "p0:residual[0.2]"]
        assert self.report.rows[0].label == "residual[0]"

    def test_summary(self):
        """Test the JSON summary counts."""
        summary = self.report.summary()
        assert summary["command"] == "identity"
        assert summary["pass"] is False
        assert summary["counts"] == {"rows": 2, "passed": 1, "failed": 1}

    def test_write(self, tmp_path):
        """Test the CSV columns and the JSON metadata."""
        paths = self.report.write(tmp_path / "out")
        lines = paths["csv"].read_text().splitlines()
        assert lines[0] == "label,value,error_estimate,tolerance,pass,x1,x2"
        assert lines[1] == "residual[0],0.0001,1e-06,0.001,1,0.0,"
        assert lines[2].endswith(",0,0.2,0.1")
        data = json.loads(paths["json"].read_text())
        assert data["metadata"] == {"s": "0.5"}
        assert data["pass"] is False

    def test_empty_report(self):
        """Test an empty report passes with zero worst residual."""
        report = Report(command="norms")
        assert report.passed
        assert report.worst_residual() == 0.0
