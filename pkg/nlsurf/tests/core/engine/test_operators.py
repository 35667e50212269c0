"""Tests for operators.py module."""
import numpy as np
import pytest
from pydantic import ValidationError

from nlsurf.core.engine.fields import ScalarField, make_field
from nlsurf.core.engine.kernels import MollifierConfig, make_fractional_kernel, mollify_kernel
from nlsurf.core.engine.operators import (
    QuadratureConfig,
    apply_operator,
    apply_operator_batch,
    gaussian_operator_value,
    operator_deviation,
    polar_oracle,
)
from nlsurf.core.errors import TailBoundError


class TestQuadratureConfig:
    """Test class for QuadratureConfig."""

    def test_radii_ordered(self):
        """Test the inner radius must be below the split radius."""
        with pytest.raises(ValidationError):
            QuadratureConfig(inner_radius=2.0, split_radius=1.0)
        with pytest.raises(ValidationError):
            QuadratureConfig(outer_radius=0.5)

    def test_sphere_rule_size(self):
        """Test n = 3 uses a coarser polar order."""
        cfg = QuadratureConfig(angular_order=16)
        assert cfg.sphere(2)[0].shape == (16, 2)
        assert cfg.sphere(3)[0].shape[1] == 3


class TestApplyOperator:
    """Test class for apply_operator."""

    def setup_method(self):
        """Build the n=2, sigma=1.5 kernel."""
        self.K = make_fractional_kernel(2, 1.5)

    def test_constant_is_zero(self):
        """Test a constant field gives exactly zero."""
        res = apply_operator(self.K, make_field("constant", 2, value=3.0), [0.2, 0.1])
        assert res.value == 0.0
        assert res.tail_bound == 0.0

    def test_affine_is_zero(self):
        """Test an affine field gives zero within tolerance."""
        res = apply_operator(self.K, make_field("affine", 2, slope=[1.0, -2.0], offset=0.5), [0.3, 0.4])
        assert abs(res.value) <= 1e-8

    @pytest.mark.parametrize("x", [[0.0, 0.0], [0.5, -0.2], [1.0, 1.0]])
    def test_gaussian_closed_form(self, x):
        """Test the gaussian against its hypergeometric closed form."""
        u = make_field("gaussian", 2)
        res = apply_operator(self.K, u, x)
        exact = float(gaussian_operator_value(np.asarray(x), 2, 1.5))
        assert res.value == pytest.approx(exact, rel=1e-5)
        assert res.error < 1e-6

    @pytest.mark.parametrize("x", [[0.0, 0.0], [0.3, 0.1], [-0.6, 0.4]])
    def test_polar_oracle(self, x):
        """Test the adaptive result against the 10x fixed polar grid."""
        u = make_field("gaussian", 2)
        value = apply_operator(self.K, u, x).value
        assert value == pytest.approx(polar_oracle(self.K, u, x), rel=1e-4)

    def test_one_dimensional(self):
        """Test n = 1 against the closed form."""
        K = make_fractional_kernel(1, 1.5)
        res = apply_operator(K, make_field("gaussian", 1), [0.3])
        assert res.value == pytest.approx(float(gaussian_operator_value(np.array([0.3]), 1, 1.5)), rel=1e-5)

    def test_unbounded_field_tail(self):
        """Test a field without a sup bound cannot bound its tail."""
        with pytest.raises(TailBoundError):
            apply_operator(self.K, make_field("paraboloid", 2), [0.0, 0.0])

    def test_tail_too_large(self):
        """Test a short outer radius trips the tail check."""
        cfg = QuadratureConfig(outer_radius=2.0)
        with pytest.raises(TailBoundError):
            apply_operator(self.K, make_field("gaussian", 2), [0.0, 0.0], cfg)

    def test_batch_order(self):
        """Test the batch returns results in point order."""
        u = make_field("gaussian", 2)
        pts = np.array([[0.0, 0.0], [0.4, 0.0], [0.8, 0.0]])
        batch = apply_operator_batch(self.K, u, pts, threads=2)
        for p, r in zip(pts, batch):
            assert r.value == pytest.approx(apply_operator(self.K, u, p).value, rel=1e-12)


class TestOperatorDeviation:
    """Test class for operator_deviation."""

    def setup_method(self):
        self.K = make_fractional_kernel(2, 1.5)
        self.v = make_field("gaussian", 2)

    def test_same_kernel(self):
        """Test K1 = K2 gives zero."""
        assert operator_deviation(self.K, self.K, self.v, [0.0, 0.0]).value == 0.0

    def test_linear_in_field(self):
        """Test scaling v by 2 scales the deviation by 2."""
        Ke = mollify_kernel(self.K, MollifierConfig(epsilon=0.2))
        one = operator_deviation(self.K, Ke, self.v, [0.0, 0.0]).value
        two = operator_deviation(self.K, Ke, make_field("gaussian", 2, amplitude=2.0), [0.0, 0.0], M=2.0).value
        assert two == pytest.approx(2.0 * one, rel=1e-6)

    @pytest.mark.slow
    def test_mollification_rate(self):
        """Test the log-log slope over eps is within 0.2 of 2 - sigma."""
        eps = np.array([0.2, 0.1, 0.05, 0.025])
        devs = [
            operator_deviation(self.K, mollify_kernel(self.K, MollifierConfig(epsilon=e)), self.v, [0.0, 0.0]).value
            for e in eps
        ]
        slope = np.polyfit(np.log(eps), np.log(devs), 1)[0]
        assert abs(slope - 0.5) <= 0.2
