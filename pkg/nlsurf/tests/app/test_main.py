"""Tests for main.py module."""
import json
from unittest import mock

import pytest

from nlsurf.app.config import RunConfig
from nlsurf.app.main import (
    EXIT_FAIL,
    EXIT_INPUT,
    EXIT_PASS,
    apply_overrides,
    build_parser,
    dispatch,
    main,
    run_cli,
)
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import ConfigError, SolverError

NORMS = {"command": "norms", "norms": {"count": 1}}


def report_with(value: float, tol: float = 1.0) -> Report:
    report = Report(command="norms")
    report.add(CheckRow.bound("worst_ratio", value, tol))
    return report


class TestDispatch:
    """Test class for dispatch."""

    def setup_method(self):
        """Base config without an output directory."""
        self.base = RunConfig.model_validate({**NORMS, "seed": 4})

    def _dispatch(self, tmp_path, **handler):
        cfg = apply_overrides(self.base, out=str(tmp_path))
        with mock.patch.dict("nlsurf.app.main.COMMANDS", {"norms": mock.MagicMock(**handler)}):
            return dispatch(cfg)

    def test_pass(self, tmp_path):
        """Test a passing report exits 0 and writes both files."""
        assert self._dispatch(tmp_path, return_value=report_with(0.5)) == EXIT_PASS
        data = json.loads((tmp_path / "norms.json").read_text())
        assert data["pass"] is True
        assert data["metadata"]["seed"] == "4"
        assert (tmp_path / "norms.csv").exists()

    def test_failed_check(self, tmp_path):
        """Test a failing row exits 1."""
        assert self._dispatch(tmp_path, return_value=report_with(2.0)) == EXIT_FAIL

    def test_numerical_error(self, tmp_path):
        """Test a numerical error becomes a failed error row."""
        assert self._dispatch(tmp_path, side_effect=SolverError("singular")) == EXIT_FAIL
        lines = (tmp_path / "norms.csv").read_text().splitlines()
        assert lines[1].startswith("error:SolverError,nan")
        data = json.loads((tmp_path / "norms.json").read_text())
        assert data["metadata"]["error"] == "singular"

    def test_config_error(self, tmp_path):
        """Test a configuration problem found by the handler exits 2 without reports."""
        assert self._dispatch(tmp_path, side_effect=ConfigError("bad field")) == EXIT_INPUT
        assert not (tmp_path / "norms.csv").exists()


class TestOverrides:
    """Test class for apply_overrides."""

    def setup_method(self):
        """Config with file values for every overridable field."""
        self.cfg = RunConfig.model_validate({**NORMS, "output": "a", "tol": 0.1, "seed": 1, "threads": 1})

    def test_no_flags(self):
        """Test the config is returned unchanged without flags."""
        assert apply_overrides(self.cfg) is self.cfg

    def test_flags_win(self):
        """Test flags replace the file values."""
        cfg = apply_overrides(self.cfg, out="b", tol=0.2, seed=7, threads=3)
        assert (cfg.output, cfg.tol, cfg.seed, cfg.threads) == ("b", 0.2, 7, 3)
        assert cfg.norms == self.cfg.norms

    def test_invalid_flag(self):
        """Test an invalid override raises ConfigError."""
        with pytest.raises(ConfigError):
            apply_overrides(self.cfg, threads=0)
        with pytest.raises(ConfigError):
            apply_overrides(self.cfg, tol=-1.0)


class TestMain:
    """Test class for main and run_cli."""

    def test_parser_requires_config(self):
        """Test --config is required."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])
        args = build_parser().parse_args(["--config", "c.json", "--tol", "0.5", "--threads", "2"])
        assert args.tol == 0.5
        assert args.threads == 2
        assert args.seed is None

    def test_missing_config(self, tmp_path, capsys):
        """Test an unreadable config exits 2 with a message on stderr."""
        assert main(["--config", str(tmp_path / "missing.json")]) == EXIT_INPUT
        assert capsys.readouterr().err.startswith("error: ")

    def test_invalid_config(self, tmp_path, capsys):
        """Test a config that fails validation exits 2 naming the line."""
        path = tmp_path / "bad.json"
        path.write_text('{\n  "command": "norms",\n  "norms": {"fraction": 0.5}\n}')
        assert main(["--config", str(path)]) == EXIT_INPUT
        assert f"{path}:3: norms.fraction" in capsys.readouterr().err

    @mock.patch("nlsurf.app.main.dispatch", return_value=EXIT_PASS)
    def test_flags_reach_dispatch(self, mock_dispatch, tmp_path):
        """Test command-line flags are applied before dispatch."""
        path = tmp_path / "norms.json"
        path.write_text(json.dumps(NORMS))
        out = tmp_path / "out"
        assert main(["--config", str(path), "--out", str(out), "--seed", "3", "--log-level", "warning"]) == EXIT_PASS
        cfg = mock_dispatch.call_args.args[0]
        assert cfg.output == str(out)
        assert cfg.seed == 3

    @mock.patch("nlsurf.app.main.main", return_value=EXIT_FAIL)
    @mock.patch("sys.exit")
    def test_run_cli(self, mock_exit, mock_main):
        """Test the console entry point exits with the main status."""
        run_cli()
        mock_main.assert_called_once_with()
        mock_exit.assert_called_once_with(EXIT_FAIL)
