"""Tests for commands.py module."""
from pathlib import Path
from unittest import mock

import numpy as np
import pytest

from nlsurf.app.commands import (
    COMMANDS,
    CONVERGENCE_DROP,
    DEFAULT_TOL,
    run_approx_study,
    run_certify,
    run_curvature,
    run_decomposition,
    run_holder_Ar,
    run_identity,
    run_norms,
    run_perimeter,
    run_solve,
)
from nlsurf.app.config import REQUIRED_SECTIONS, RunConfig, load_run_config
from nlsurf.core.engine.geometry import IntegralEstimate, PerimeterStudy
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.engine.solver import SolveDiagnostics

GRAPH = {"field": {"family": "gaussian", "dim": 1, "params": {"amplitude": 0.1}}, "n": 2, "s": 0.5}


def solver_config(command: str = "solve", **overrides) -> RunConfig:
    solver = {
        "kernel": {"type": "fractional", "n": 1, "sigma": 1.5},
        "epsilons": [0.2],
        "u_star": {"family": "gaussian", "dim": 1},
        "hs": [0.0625, 0.03125],
    }
    solver.update(overrides)
    return RunConfig(command=command, solver=solver, threads=1)


def fake_result():
    result = mock.MagicMock()
    result.diagnostics = SolveDiagnostics(
        residual=1e-12, dominance_margin=0.1, condition_estimate=10.0, monotone=True, unknowns=11, method="dense_lu"
    )
    return result


class TestCommandTable:
    """Test class for the COMMANDS table."""

    def test_every_command_has_handler(self):
        """Test handlers exist for exactly the configured commands."""
        assert set(COMMANDS) == set(REQUIRED_SECTIONS)
        assert all(callable(h) for h in COMMANDS.values())


class TestPerimeter:
    """Test class for run_perimeter."""

    def setup_method(self):
        """Disc of radius 1/2 with a dilation factor of 2."""
        self.cfg = RunConfig(
            command="perimeter",
            set={"shape": "ball", "lower": [-1.0, -1.0], "upper": [1.0, 1.0], "radius": 0.5},
            perimeter={
                "s": 0.5,
                "omega_lower": [-0.75, -0.75],
                "omega_upper": [0.75, 0.75],
                "hs": [0.0625, 0.03125],
                "scale": 2.0,
            },
            threads=1,
        )
        self.study = PerimeterStudy(hs=(0.0625, 0.03125), values=(1.0, 1.1), extrapolated=1.2, rate=0.5)

    def test_scaling_rows(self):
        """Test the scaled perimeter is compared with lambda^(n-s) times the finer value."""
        scaled = 1.1 * 2.0**1.5
        with mock.patch("nlsurf.app.commands.perimeter_refinement", return_value=self.study), mock.patch(
            "nlsurf.app.commands.fractional_perimeter", return_value=scaled
        ) as perimeter:
            report = run_perimeter(self.cfg)
        perimeter.assert_called_once()
        E, omega = perimeter.call_args.args[:2]
        assert E.h == pytest.approx(0.0625)
        assert omega.lower == (-1.5, -1.5)
        assert report.row("perimeter[h=0.03125]").value == 1.1
        assert report.row("extrapolated").error_estimate == pytest.approx(0.1)
        row = report.row("scaling_error")
        assert row.value == pytest.approx(0.0, abs=1e-12)
        assert row.tolerance == DEFAULT_TOL["perimeter"]
        assert report.passed

    def test_scaling_failure(self):
        """Test a scaled value off by 5% fails."""
        with mock.patch("nlsurf.app.commands.perimeter_refinement", return_value=self.study), mock.patch(
            "nlsurf.app.commands.fractional_perimeter", return_value=1.05 * 1.1 * 2.0**1.5
        ):
            report = run_perimeter(self.cfg)
        assert report.row("scaling_error").value == pytest.approx(0.05)
        assert not report.passed


class TestCurvature:
    """Test class for run_curvature."""

    def _config(self, **extra):
        return RunConfig(
            command="curvature",
            set={"shape": "halfspace", "lower": [-1.0, -1.0], "upper": [1.0, 1.0], "h": 0.125},
            curvature={"s": [0.3, 0.5], "points": [[0.0, 0.0], [0.25, 0.0]], **extra},
            threads=1,
        )

    def test_labels_and_bounds(self):
        """Test one row per (s, point) checked against the expected value."""
        est = IntegralEstimate(value=2e-7, error=1e-9)
        with mock.patch("nlsurf.app.commands.nonlocal_mean_curvature_estimate", return_value=est) as curv:
            report = run_curvature(self._config(expected=0.0))
        assert curv.call_count == 4
        assert [r.label for r in report.rows] == [
            "curvature[s=0.3;0,0]",
            "curvature[s=0.3;0.25,0]",
            "curvature[s=0.5;0,0]",
            "curvature[s=0.5;0.25,0]",
        ]
        assert report.rows[0].extra == {"s": 0.3, "curvature": 2e-7}
        assert report.passed

    def test_info_without_expected(self):
        """Test rows are informational when no value is expected."""
        est = IntegralEstimate(value=5.0, error=0.1)
        with mock.patch("nlsurf.app.commands.nonlocal_mean_curvature_estimate", return_value=est):
            report = run_curvature(self._config())
        assert report.passed
        assert report.rows[0].value == 5.0


class TestGraphCommands:
    """Test class for run_identity, run_decomposition and run_holder_Ar."""

    def test_identity_points_and_tol(self):
        """Test the origin default and the tolerance override reach the batch check."""
        cfg = RunConfig(command="identity", graph=GRAPH, tol=0.01, threads=2)
        with mock.patch("nlsurf.app.commands.check_graph_identity_batch", return_value=Report(command="identity")) as c:
            run_identity(cfg)
        P, points, tol, threads = c.call_args.args
        assert P.n == 2
        assert points == [[0.0]]
        assert tol == 0.01
        assert threads == 2

    def test_decomposition_merges_points(self):
        """Test one part per point, truncated to R^(n-1)."""
        cfg = RunConfig(command="decomposition", graph={**GRAPH, "points": [[0.1], [0.2, 0.0]]}, threads=1)
        seen = []

        def fake(P, p, tol, expect_solution):
            seen.append(list(p))
            part = Report(command="decomposition")
            part.add(CheckRow.bound(f"residual_i[{p[0]:g}]", 0.0, tol))
            return part

        with mock.patch("nlsurf.app.commands.check_decomposition", side_effect=fake):
            report = run_decomposition(cfg)
        assert seen == [[0.1], [0.2]]
        assert [r.label for r in report.rows] == ["residual_i[0.1]", "residual_i[0.2]"]
        assert report.metadata["n"] == "2"

    def test_holder_ar_metadata(self):
        """Test the fit report carries the problem parameters."""
        cfg = RunConfig(command="holder-Ar", graph={**GRAPH, "n": 3, "field": {"family": "gaussian", "dim": 2}})
        fit = mock.MagicMock()
        fit.to_report.return_value = Report(command="holder-Ar")
        with mock.patch("nlsurf.app.commands.holder_exponent_Ar", return_value=fit) as holder:
            report = run_holder_Ar(cfg)
        pairs = holder.call_args.args[1]
        assert len(pairs) > 0
        assert report.metadata["n"] == "3"
        assert report.metadata["beta"] == "1.0"


class TestCertify:
    """Test class for run_certify."""

    def test_kernel_section(self):
        """Test the configured kernel is certified at order k."""
        cfg = RunConfig(command="certify-kernel", kernel={"n": 1, "sigma": 1.5}, certify={"k": 2})
        with mock.patch(
            "nlsurf.app.commands.verify_structural_bounds", return_value=Report(command="certify-kernel")
        ) as verify:
            run_certify(cfg)
        K, k = verify.call_args.args
        assert K.sigma == 1.5
        assert k == 2

    def test_rate_sweep(self):
        """Test deviations scaling like eps^(2 - sigma) pass the slope row."""
        cfg = RunConfig(
            command="certify-kernel",
            kernel={"n": 1, "sigma": 1.5},
            certify={"epsilons": [0.05, 0.2, 0.1], "probe": {"family": "gaussian", "dim": 1}},
        )

        def deviation(K, eps, v, x, M):
            return IntegralEstimate(value=3.0 * eps**0.5, error=0.0)

        with mock.patch(
            "nlsurf.app.commands.verify_structural_bounds", return_value=Report(command="certify-kernel")
        ), mock.patch("nlsurf.app.commands.mollify_kernel", side_effect=lambda K, c: c.epsilon), mock.patch(
            "nlsurf.app.commands.operator_deviation", side_effect=deviation
        ):
            report = run_certify(cfg)
        labels = [r.label for r in report.rows]
        assert labels == ["deviation[0.2]", "deviation[0.1]", "deviation[0.05]", "rate_slope_error"]
        assert report.row("rate_slope_error").value == pytest.approx(0.0, abs=1e-12)
        assert report.passed


class TestSolve:
    """Test class for run_solve and run_approx_study."""

    def _patches(self, distances=None, violation=0.0):
        return [
            mock.patch("nlsurf.app.commands.mollify_kernel"),
            mock.patch("nlsurf.app.commands.tabulate_kernel"),
            mock.patch("nlsurf.app.commands.operator_rhs"),
            mock.patch("nlsurf.app.commands.DirichletProblem"),
            mock.patch("nlsurf.app.commands.solve_dirichlet", side_effect=lambda P: fake_result()),
            mock.patch("nlsurf.app.commands.interior_distance", side_effect=distances or []),
            mock.patch("nlsurf.app.commands.max_principle_violation", return_value=violation),
        ]

    def _run(self, cfg, **kwargs):
        patches = self._patches(**kwargs)
        for p in patches:
            p.start()
        try:
            return run_solve(cfg)
        finally:
            for p in patches:
                p.stop()

    def test_error_ratio_passes(self):
        """Test an error drop above the required factor passes."""
        report = self._run(solver_config(), distances=[0.1, 0.04])
        assert report.row("error[eps=0.2;h=0.0625]").value == 0.1
        row = report.row("error_ratio[eps=0.2;h=0.0625->0.03125]")
        assert row.value == pytest.approx(0.4)
        assert row.tolerance == pytest.approx(1.0 / CONVERGENCE_DROP)
        assert report.row("solve[eps=0.2;h=0.03125]:residual").passed
        assert report.passed

    def test_error_ratio_fails(self):
        """Test a slow error drop fails."""
        report = self._run(solver_config(), distances=[0.1, 0.08])
        assert not report.row("error_ratio[eps=0.2;h=0.0625->0.03125]").passed

    def test_max_principle_rows(self):
        """Test a zero right side checks the maximum principle instead of errors."""
        report = self._run(solver_config(rhs="zero"), violation=1e-3)
        labels = [r.label for r in report.rows]
        assert "max_principle[eps=0.2;h=0.0625]" in labels
        assert not any(label.startswith("error") for label in labels)
        assert not report.passed

    def test_approx_study_prefixes(self):
        """Test several grids are merged with an h prefix."""
        part = Report(command="approx-study", metadata={"kernel": "fractional"})
        part.add(CheckRow.info("distance[0.2]", 0.1))
        cfg = solver_config("approx-study", rhs="gaussian")
        with mock.patch("nlsurf.app.commands.approximation_study", return_value=part) as study:
            report = run_approx_study(cfg)
        assert study.call_count == 2
        assert [r.label for r in report.rows] == ["h=0.0625:distance[0.2]", "h=0.03125:distance[0.2]"]
        base = study.call_args.args[0]
        f = base.f(np.zeros((1, 1)), np.zeros(1))
        assert float(f[0]) < 0.0

    def test_approx_study_single_grid(self):
        """Test a single grid returns the study report unchanged."""
        part = Report(command="approx-study")
        cfg = solver_config("approx-study", rhs="zero", hs=[0.0625])
        with mock.patch("nlsurf.app.commands.approximation_study", return_value=part):
            assert run_approx_study(cfg) is part

    @pytest.mark.slow
    def test_approx_study_fixture_halves_distance(self):
        """Test the shipped sweep cuts the distance at least in half from eps=0.2 to eps=0.05."""
        cfg = load_run_config(Path(__file__).resolve().parents[3] / "configs" / "approx_study.json")
        report = COMMANDS["approx-study"](cfg)
        assert report.row("distance[0.05]").value <= 0.5 * report.row("distance[0.2]").value
        assert report.row("drop[0.2->0.05]").passed
        assert report.passed


class TestNorms:
    """Test class for run_norms."""

    def _part(self, ratio):
        part = Report(command="norms")
        part.add(CheckRow.info("lhs:order_0", 1.0))
        part.add(CheckRow.info("lhs:total", ratio))
        part.add(CheckRow.info("rhs_sum", 1.0))
        part.add(CheckRow.bound("covering_ratio", ratio, 1.0))
        return part

    def _interp(self, drift=0.01):
        part = Report(command="interpolation")
        part.add(CheckRow.info("interp[0.5]", 2.0))
        part.add(CheckRow.bound("interp_drift[0.5]", drift, 0.1))
        return part

    def test_rows_and_worst(self):
        """Test the kept rows per polynomial and the worst ratio."""
        cfg = RunConfig(command="norms", norms={"count": 2, "fraction": 0.05}, seed=5)
        with mock.patch(
            "nlsurf.app.commands.covering_inequality_check", side_effect=[self._part(0.3), self._part(0.6)]
        ) as check, mock.patch("nlsurf.app.commands.interpolation_check", return_value=self._interp()) as interp:
            report = run_norms(cfg)
        assert check.call_count == 2
        assert interp.call_count == 2
        assert interp.call_args.args[1] == [0.5, 0.1]
        assert [r.label for r in report.rows] == [
            "poly[0]:lhs:total",
            "poly[0]:rhs_sum",
            "poly[0]:covering_ratio",
            "poly[0]:interp[0.5]",
            "poly[0]:interp_drift[0.5]",
            "poly[1]:lhs:total",
            "poly[1]:rhs_sum",
            "poly[1]:covering_ratio",
            "poly[1]:interp[0.5]",
            "poly[1]:interp_drift[0.5]",
            "worst_ratio",
        ]
        assert report.row("worst_ratio").value == 0.6
        assert report.metadata["seed"] == "5"
        assert report.passed

    def test_ratio_above_one_fails(self):
        """Test a covering ratio above the tolerance fails."""
        cfg = RunConfig(command="norms", norms={"count": 1, "fraction": 0.05})
        with mock.patch("nlsurf.app.commands.covering_inequality_check", return_value=self._part(1.5)), mock.patch(
            "nlsurf.app.commands.interpolation_check", return_value=self._interp()
        ):
            report = run_norms(cfg)
        assert not report.row("worst_ratio").passed

    def test_interpolation_drift_fails(self):
        """Test an interpolation constant that moves with the density fails the run."""
        cfg = RunConfig(command="norms", norms={"count": 1, "fraction": 0.05})
        with mock.patch("nlsurf.app.commands.covering_inequality_check", return_value=self._part(0.2)), mock.patch(
            "nlsurf.app.commands.interpolation_check", return_value=self._interp(drift=0.5)
        ):
            report = run_norms(cfg)
        assert report.row("worst_ratio").passed
        assert not report.row("poly[0]:interp_drift[0.5]").passed
        assert not report.passed
