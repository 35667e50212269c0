"""Tests for errors.py module."""
import pytest

from nlsurf.core.errors import (
    BoundaryResolutionError,
    ConfigError,
    ContainmentError,
    CoverError,
    DegenerateSampleError,
    DerivativeError,
    GeometryError,
    KernelError,
    MissingGradientError,
    NonlocalError,
    OverlapError,
    QuadratureError,
    SlowDecayError,
    SolverError,
    TailBoundError,
)


class TestErrors:
    """Test class for errors.py module."""

    @pytest.mark.parametrize(
        "cls",
        [
            QuadratureError,
            TailBoundError,
            MissingGradientError,
            KernelError,
            GeometryError,
            SlowDecayError,
            DegenerateSampleError,
            DerivativeError,
            CoverError,
            SolverError,
            ConfigError,
        ],
    )
    def test_hierarchy_root(self, cls):
        """Test every error derives from NonlocalError."""
        assert issubclass(cls, NonlocalError)

    def test_geometry_subclasses(self):
        """Test the geometry errors share GeometryError."""
        for cls in (OverlapError, BoundaryResolutionError, ContainmentError):
            assert issubclass(cls, GeometryError)
        assert issubclass(TailBoundError, QuadratureError)

    def test_quadrature_error_carries_estimates(self):
        """Test QuadratureError keeps the best estimate and its error."""
        e = QuadratureError("missed", best_estimate=1.5, error_estimate=0.1)
        assert str(e) == "missed"
        assert e.best_estimate == 1.5
        assert e.error_estimate == 0.1

    def test_solver_error_carries_condition(self):
        """Test SolverError keeps the condition estimate."""
        assert SolverError("bad", condition_estimate=1e13).condition_estimate == 1e13
        assert SolverError("bad").condition_estimate is None

    def test_config_error_carries_line(self):
        """Test ConfigError keeps the offending line."""
        assert ConfigError("x", line=4).line == 4
