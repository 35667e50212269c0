"""Tests for run_acceptance.py module."""
import json
from unittest import mock

import pytest

from nlsurf.scripts.run_acceptance import (
    DEFAULT_CONFIG,
    EXPECTED_EXIT,
    print_summary,
    run_fixture,
    run_suite,
    start_acceptance,
)

NORMS = {"command": "norms", "norms": {"count": 1}}


class TestRunAcceptance:
    """Test class for run_acceptance.py module."""

    def setup_method(self):
        """Fixture contents shared by the tests."""
        self.norms = json.dumps(NORMS)

    @mock.patch("nlsurf.scripts.run_acceptance.dispatch", return_value=0)
    def test_run_fixture(self, mock_dispatch, tmp_path):
        """Test a fixture is dispatched into its own output directory."""
        path = tmp_path / "norms_small.json"
        path.write_text(self.norms)
        code, seconds = run_fixture(path, tmp_path / "out", threads=2)
        assert code == 0
        assert seconds >= 0.0
        cfg = mock_dispatch.call_args.args[0]
        assert cfg.output == str(tmp_path / "out" / "norms_small")
        assert cfg.threads == 2

    @mock.patch("nlsurf.scripts.run_acceptance.dispatch")
    def test_run_fixture_bad_config(self, mock_dispatch, tmp_path, capsys):
        """Test an invalid fixture exits 2 without dispatch."""
        path = tmp_path / "broken.json"
        path.write_text("{")
        code, _ = run_fixture(path, tmp_path / "out")
        assert code == 2
        mock_dispatch.assert_not_called()
        assert "broken.json" in capsys.readouterr().out

    @mock.patch("nlsurf.scripts.run_acceptance.dispatch", side_effect=[1, 0])
    def test_run_suite(self, mock_dispatch, tmp_path):
        """Test fixtures run in name order with their expected status."""
        (tmp_path / "certify_over_singular.json").write_text(
            json.dumps({"command": "certify-kernel", "kernel": {"type": "over_singular", "n": 1, "sigma": 1.5}})
        )
        (tmp_path / "norms_cover.json").write_text(self.norms)
        (tmp_path / "notes.txt").write_text("ignored")
        results = run_suite(tmp_path, tmp_path / "out")
        assert [(name, expected, code) for name, expected, code, _ in results] == [
            ("certify_over_singular.json", 1, 1),
            ("norms_cover.json", 0, 0),
        ]

    def test_print_summary(self, capsys):
        """Test the summary flags mismatches."""
        assert print_summary([("a.json", 0, 0, 1.0), ("b.json", 1, 1, 2.0)])
        assert not print_summary([("a.json", 0, 1, 1.0)])
        output = capsys.readouterr().out
        assert "MISMATCH" in output
        assert "0/1 fixtures as expected" in output

    def test_expected_failures(self):
        """Test only the over-singular kernel is expected to fail."""
        assert EXPECTED_EXIT == {"certify_over_singular.json": 1}

    @mock.patch("sys.exit", side_effect=SystemExit)
    def test_start_acceptance_missing_dir(self, mock_exit, tmp_path, monkeypatch):
        """Test a missing fixture directory exits 2."""
        monkeypatch.chdir(tmp_path)
        with pytest.raises(SystemExit):
            start_acceptance()
        mock_exit.assert_called_once_with(2)

    @mock.patch("sys.exit", side_effect=SystemExit)
    @mock.patch("nlsurf.scripts.run_acceptance.run_suite", return_value=[("a.json", 0, 0, 0.5)])
    def test_start_acceptance(self, mock_suite, mock_exit, tmp_path, monkeypatch):
        """Test a clean suite exits 0."""
        monkeypatch.chdir(tmp_path)
        (tmp_path / DEFAULT_CONFIG["config_dir"]).mkdir()
        with pytest.raises(SystemExit):
            start_acceptance()
        mock_exit.assert_called_once_with(0)
        assert mock_suite.call_args.args[2] == 1
