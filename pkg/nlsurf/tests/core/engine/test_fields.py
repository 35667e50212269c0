"""Tests for fields.py module."""
import math

import numpy as np
import pytest

from nlsurf.core.engine.fields import (
    F_closed_form,
    F_infinity,
    F_primitive,
    GraphWindow,
    ScalarField,
    U_remainder,
    affine_field,
    constant_field,
    cosine_field,
    gaussian_field,
    holder_bump_field,
    lattice_field,
    make_field,
    multi_indices,
    p_weight,
    paraboloid_field,
    phi,
    polynomial_field,
    random_polynomial,
    second_difference,
    smooth_step,
    smooth_step_derivative,
)
from nlsurf.core.errors import MissingGradientError, NonlocalError


class TestSecondDifference:
    """Test class for second_difference."""

    def test_paraboloid(self):
        """Test |x|^2 gives 2|w|^2 for any x and w."""
        u = make_field("paraboloid", 2, scale=2.0)
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        w = np.array([[0.7, 0.1], [-1.0, 3.0]])
        np.testing.assert_allclose(second_difference(u, x, w), 2.0 * np.sum(w * w, axis=-1), rtol=1e-12)

    def test_affine_cancels(self):
        """Test an affine field has zero second difference."""
        u = affine_field([1.5, -2.0, 0.25], offset=3.0)
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        np.testing.assert_allclose(second_difference(u, x, w), 0.0, atol=1e-12)

    def test_cosine(self):
        """Test cos(x1) at 0 with w = (pi, 0) gives -4."""
        u = cosine_field([1.0, 0.0])
        assert second_difference(u, [0.0, 0.0], [math.pi, 0.0]) == pytest.approx(-4.0, abs=1e-12)

    def test_one_dimensional_scalars(self):
        """Test scalar points are accepted in dimension one."""
        u = paraboloid_field(1)
        assert float(second_difference(u, 0.4, 0.5)) == pytest.approx(0.25, abs=1e-14)


class TestScalarFunctions:
    """Test class for F, p and their closed forms."""

    def test_F_zero(self):
        """Test F(0) = 0."""
        assert F_primitive(0.0, 2, 0.5) == 0.0

    def test_F_odd(self):
        """Test F(-t) = -F(t)."""
        assert F_primitive(-1.7, 2, 0.5) == pytest.approx(-F_primitive(1.7, 2, 0.5), abs=1e-14)

    def test_F_against_gauss_rule(self):
        """Test F(1) against a 60-point Gauss-Legendre rule on [0, 1]."""
        t, w = np.polynomial.legendre.leggauss(60)
        oracle = float(np.sum(0.5 * w * p_weight(0.5 * (t + 1.0), 2, 0.5)))
        assert F_primitive(1.0, 2, 0.5) == pytest.approx(oracle, abs=1e-10)

    def test_closed_form_matches_quadrature(self):
        """Test the incomplete-beta form agrees with quadrature."""
        for t in (-3.0, -0.2, 0.7, 5.0, 40.0):
            for n, s in ((2, 0.3), (3, 0.5), (4, 0.9)):
                assert float(F_closed_form(t, n, s)) == pytest.approx(F_primitive(t, n, s), abs=1e-10)

    def test_F_infinity(self):
        """Test F(inf) against the gamma-function expression and large t."""
        n, s = 3, 0.5
        exact = 0.5 * math.sqrt(math.pi) * math.gamma(0.5 * (n + s - 1)) / math.gamma(0.5 * (n + s))
        assert F_infinity(n, s) == pytest.approx(exact, rel=1e-12)
        assert F_primitive(math.inf, n, s) == pytest.approx(exact, rel=1e-12)
        assert F_primitive(-math.inf, n, s) == pytest.approx(-exact, rel=1e-12)

    def test_p_values(self):
        """Test p(0) = 1 and p(1) = 2^{-1.25} for n=2, s=0.5."""
        assert float(p_weight(0.0, 2, 0.5)) == 1.0
        assert float(p_weight(1.0, 2, 0.5)) == pytest.approx(2.0**-1.25, rel=1e-14)

    def test_p_monotone(self):
        """Test p decreases in |t|."""
        rng = np.random.default_rng(1)
        t = rng.normal(scale=3.0, size=200)
        t2 = rng.normal(scale=3.0, size=200)
        bigger = np.abs(t) >= np.abs(t2)
        assert np.all(p_weight(t[bigger], 3, 0.4) <= p_weight(t2[bigger], 3, 0.4))

    def test_invalid_parameters(self):
        """Test F rejects n < 2 and s outside (0, 1)."""
        with pytest.raises(NonlocalError):
            F_primitive(1.0, 1, 0.5)
        with pytest.raises(NonlocalError):
            F_primitive(1.0, 2, 1.0)


class TestRemainder:
    """Test class for U_remainder."""

    def test_affine_zero(self):
        """Test U vanishes for affine fields."""
        u = affine_field([2.0, -1.0], 0.5)
        np.testing.assert_allclose(U_remainder(u, [[0.1, 0.2]], [[0.5, -0.3]]), 0.0, atol=1e-14)

    def test_paraboloid(self):
        """Test U = |w|^2 / 2 for |x|^2 / 2."""
        u = paraboloid_field(2)
        w = np.array([[0.3, 0.4], [1.0, -2.0]])
        np.testing.assert_allclose(U_remainder(u, [[1.0, 2.0], [-0.5, 0.0]], w), 0.5 * np.sum(w * w, axis=-1))

    def test_holder_bump_slope(self):
        """Test the log-log slope of U at 0 is at least 1.5 for beta = 0.6."""
        u = holder_bump_field(2, beta=0.6)
        radii = np.geomspace(1e-4, 1e-2, 9)
        w = np.stack([radii, np.zeros_like(radii)], axis=-1)
        values = np.abs(U_remainder(u, np.zeros((radii.size, 2)), w))
        slope = np.polyfit(np.log(radii), np.log(values), 1)[0]
        assert slope >= 1.5

    def test_missing_gradient(self):
        """Test a field without gradient raises."""
        u = ScalarField(dim=1, func=lambda x: x[..., 0])
        with pytest.raises(MissingGradientError):
            U_remainder(u, [0.0], [1.0])


class TestFieldFamilies:
    """Test class for the field families."""

    def test_make_field_unknown(self):
        """Test an unknown family raises."""
        with pytest.raises(NonlocalError):
            make_field("nope", 2)

    def test_gaussian_gradient_matches_differences(self):
        """Test the analytic gradient agrees with finite differences."""
        u = gaussian_field(2, amplitude=0.7, width=0.8, center=[0.1, -0.2])
        x = np.array([[0.3, 0.4]])
        step = 1e-6
        fd = [(u(x + step * e) - u(x - step * e)) / (2 * step) for e in np.eye(2)]
        np.testing.assert_allclose(u.gradient(x)[0], np.ravel(fd), rtol=1e-6)

    def test_hessian_difference_fallback(self, caplog):
        """Test a field without a Hessian falls back to differences and logs it."""
        u = ScalarField(dim=2, func=lambda y: y[..., 0] ** 2 * y[..., 1], name="x2y")
        with caplog.at_level("DEBUG", logger="nlsurf.fields"):
            hess = u.hessian(np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(hess[0], [[4.0, 2.0], [2.0, 0.0]], atol=1e-6)
        assert "'x2y' has no Hessian" in caplog.text

    def test_constant_derivatives(self):
        """Test the constant field's derivatives vanish."""
        u = constant_field(3.0, 2)
        assert float(u.derivative((0, 0), np.zeros(2))) == 3.0
        assert float(u.derivative((1, 1), np.zeros(2))) == 0.0

    def test_polynomial_exact_derivatives(self):
        """Test x^2 y derivatives of every order."""
        u = polynomial_field([(1.0, (2, 1))], 2)
        x = np.array([1.5, -2.0])
        assert float(u(x)) == pytest.approx(-4.5)
        assert float(u.derivative((1, 0), x)) == pytest.approx(2 * 1.5 * -2.0)
        assert float(u.derivative((2, 1), x)) == pytest.approx(2.0)
        assert float(u.derivative((0, 2), x)) == 0.0

    def test_random_polynomial_is_seeded(self):
        """Test the same generator seed gives the same polynomial."""
        a = random_polynomial(2, 3, np.random.default_rng(5))
        b = random_polynomial(2, 3, np.random.default_rng(5))
        pts = np.random.default_rng(0).normal(size=(4, 2))
        np.testing.assert_array_equal(a(pts), b(pts))

    def test_derivative_without_rule(self):
        """Test a third derivative of a gaussian has no exact rule."""
        with pytest.raises(NotImplementedError):
            gaussian_field(1).derivative((3,), np.zeros(1))

    def test_lattice_field_interpolates_and_extends(self):
        """Test the lattice field is exact for linear data and uses the exterior outside."""
        axes = [np.linspace(-1.0, 1.0, 11)]
        values = 2.0 * axes[0] + 1.0
        u = lattice_field(axes, values, lambda y: np.abs(y[..., 0]) <= 1.0, constant_field(-5.0, 1))
        assert float(u(np.array([0.33]))) == pytest.approx(1.66)
        assert float(u(np.array([1.5]))) == -5.0

    def test_multi_indices(self):
        """Test the multi-indices of order 2 in two variables."""
        assert sorted(multi_indices(2, 2)) == [(0, 2), (1, 1), (2, 0)]


class TestCutoffs:
    """Test class for smooth_step and GraphWindow."""

    def test_smooth_step_limits(self):
        """Test the step is 1 below a, 0 above b and monotone in between."""
        t = np.linspace(-1.0, 2.0, 301)
        v = smooth_step(t, 0.25, 0.5)
        assert np.all(v[t <= 0.25] == 1.0)
        assert np.all(v[t >= 0.5] == 0.0)
        assert np.all(np.diff(v) <= 1e-15)

    def test_smooth_step_derivative(self):
        """Test the derivative against central differences."""
        t = np.linspace(0.27, 0.48, 9)
        h = 1e-6
        fd = (smooth_step(t + h, 0.25, 0.5) - smooth_step(t - h, 0.25, 0.5)) / (2 * h)
        np.testing.assert_allclose(smooth_step_derivative(t, 0.25, 0.5), fd, rtol=1e-5, atol=1e-8)

    def test_phi_profile(self):
        """Test phi is 1 on [0, 1/4] and 0 beyond 1/2, symmetric in t."""
        assert float(phi(0.2)) == 1.0
        assert float(phi(-0.6)) == 0.0
        assert float(phi(0.3)) == pytest.approx(float(phi(-0.3)))

    def test_window_supports(self):
        """Test zeta and eta vanish outside the window."""
        W = GraphWindow(1.0)
        assert float(W.zeta(np.array([0.2]))) == 1.0
        assert float(W.zeta(np.array([0.6]))) == 0.0
        assert float(W.eta(np.array([0.1, 0.1]))) == 1.0
        assert float(W.eta(np.array([0.1, 0.55]))) == 0.0

    def test_window_rejects_nonpositive_radius(self):
        """Test R must be positive."""
        with pytest.raises(NonlocalError):
            GraphWindow(0.0)
