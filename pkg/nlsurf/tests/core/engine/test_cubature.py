"""Tests for cubature.py module."""
import math

import numpy as np
import pytest

from nlsurf.core.engine.cubature import (
    default_outer_radius,
    fixed_radial_rule,
    gauss_legendre,
    geometric_edges,
    half_line_edges,
    integrate_radial,
    power_law_head,
    power_law_head_error,
    sphere_area,
    sphere_rule,
    tensor_gauss,
)
from nlsurf.core.errors import QuadratureError


class TestRules:
    """Test class for the fixed rules."""

    def test_gauss_legendre_unit_interval(self):
        """Test the rule integrates x^5 exactly on [0, 1]."""
        x, w = gauss_legendre(4)
        assert float(np.sum(w * x**5)) == pytest.approx(1.0 / 6.0, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_sphere_rule_area(self, n):
        """Test the weights sum to the sphere measure."""
        _, w = sphere_rule(n, 16)
        assert float(np.sum(w)) == pytest.approx(sphere_area(n), rel=1e-13)

    @pytest.mark.parametrize("n", [2, 3])
    def test_sphere_rule_symmetric(self, n):
        """Test every direction has its antipode in the rule."""
        dirs, _ = sphere_rule(n, 12)
        for d in dirs:
            assert np.min(np.linalg.norm(dirs + d, axis=1)) < 1e-12

    def test_sphere_rule_second_moment(self):
        """Test the integral of x_1^2 over S^2 is 4 pi / 3."""
        dirs, w = sphere_rule(3, 10)
        assert float(np.sum(w * dirs[:, 0] ** 2)) == pytest.approx(4.0 * math.pi / 3.0, rel=1e-12)

    def test_sphere_rule_dimension_limit(self):
        """Test dimensions above three are rejected."""
        with pytest.raises(ValueError):
            sphere_rule(4, 8)

    def test_geometric_edges(self):
        """Test the edges are geometric and span the interval."""
        e = geometric_edges(1e-3, 1.0)
        assert e[0] == pytest.approx(1e-3)
        assert e[-1] == pytest.approx(1.0)
        assert np.all(e[1:] / e[:-1] <= 2.0 + 1e-12)
        with pytest.raises(ValueError):
            geometric_edges(0.0, 1.0)

    def test_half_line_edges(self):
        """Test widths double from the first one."""
        e = half_line_edges(1.0, 0.5, 10.0)
        np.testing.assert_allclose(np.diff(e)[:3], [0.5, 1.0, 2.0])
        assert e[-1] - 1.0 >= 10.0

    def test_tensor_gauss_volume(self):
        """Test the tensor rule integrates xy over a box exactly."""
        pts, w = tensor_gauss([0.0, -1.0], [2.0, 3.0], 3)
        assert float(np.sum(w * pts[:, 0] * pts[:, 1])) == pytest.approx(2.0 * 4.0, rel=1e-13)

    def test_fixed_radial_rule(self):
        """Test the fixed rule integrates r^2 over its panels."""
        r, w = fixed_radial_rule(np.array([0.0, 1.0, 3.0]), 4)
        assert float(np.sum(w * r**2)) == pytest.approx(9.0, rel=1e-14)


class TestIntegrateRadial:
    """Test class for integrate_radial."""

    def test_smooth_integrand(self):
        """Test the integral of exp(-r) over [0, 20]."""
        res = integrate_radial(lambda r: np.exp(-r), np.array([0.0, 1.0, 20.0]), tol=1e-12)
        assert float(res.value) == pytest.approx(1.0 - math.exp(-20.0), abs=1e-12)
        assert float(res.error) <= 1e-12

    def test_singular_integrand_with_geometric_panels(self):
        """Test r^{-1/2} on [1e-8, 1] within the requested tolerance."""
        res = integrate_radial(lambda r: r**-0.5, geometric_edges(1e-8, 1.0), tol=1e-10)
        assert float(res.value) == pytest.approx(2.0 - 2.0 * 1e-4, abs=1e-9)

    def test_vector_integrand(self):
        """Test vector-valued integrands share the panels."""
        res = integrate_radial(lambda r: np.stack([r, r**2]), np.array([0.0, 2.0]), tol=1e-12)
        np.testing.assert_allclose(res.value, [2.0, 8.0 / 3.0], rtol=1e-13)
        assert res.error.shape == (2,)

    def test_failure_raises_with_estimate(self):
        """Test an unresolvable integrand raises with its best estimate."""
        with pytest.raises(QuadratureError) as info:
            integrate_radial(lambda r: np.sin(1.0 / r), np.array([1e-6, 1.0]), tol=1e-14, max_refinements=1)
        assert info.value.best_estimate is not None
        assert info.value.error_estimate > 1e-14

    def test_failure_returns_when_asked(self):
        """Test raise_on_failure=False returns the best estimate."""
        res = integrate_radial(
            lambda r: np.sin(1.0 / r), np.array([1e-6, 1.0]), tol=1e-14, max_refinements=1, raise_on_failure=False
        )
        assert float(res.error) > 1e-14


class TestHeadAndTail:
    """Test class for the near-field head and the outer radius."""

    def test_power_law_head_exact(self):
        """Test the head is exact for a pure power."""
        rho, p = 0.1, 0.5
        assert float(power_law_head(rho**p, rho, p)) == pytest.approx(rho ** (p + 1) / (p + 1), rel=1e-14)
        assert float(power_law_head_error(rho**p, (rho / 2) ** p, rho, p)) == pytest.approx(0.0, abs=1e-16)

    def test_power_law_head_rejects_nonintegrable(self):
        """Test exponents <= -1 raise."""
        with pytest.raises(QuadratureError):
            power_law_head(1.0, 0.1, -1.0)

    def test_default_outer_radius(self):
        """Test the tail at the returned radius is tol/10."""
        C, sigma, tol = 2.0, 1.5, 1e-6
        rho = default_outer_radius(C, sigma, tol)
        assert C * rho**-sigma / sigma == pytest.approx(tol / 10.0, rel=1e-12)
