"""Singular quadrature for the integral of K(x, w) times the second difference.

The integral is split at the inner radius (Hessian model integrated exactly),
integrated adaptively in the radial variable up to the outer radius, and the
remaining tail is bounded, not computed.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from nlsurf.core.engine.cubature import (
    default_outer_radius,
    fixed_radial_rule,
    geometric_edges,
    integrate_radial,
    sphere_rule,
)
from nlsurf.core.engine.fields import ScalarField
from nlsurf.core.engine.kernels import KernelSpec, fractional_laplacian_constant, normalization_scale
from nlsurf.core.errors import QuadratureError, TailBoundError
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.operators")

Array = np.ndarray

# Families whose second difference vanishes identically.
AFFINE_FAMILIES = ("constant", "affine")


class QuadratureConfig(BaseModel):
    """Controls of the near / middle / tail split."""

    model_config = ConfigDict(frozen=True)

    inner_radius: float = Field(default=1e-3, gt=0.0)
    split_radius: float = Field(default=1.0, gt=0.0)
    outer_radius: Optional[float] = Field(default=None, gt=0.0)
    inner_correction: Literal["drop", "taylor2"] = "taylor2"
    radial_order: int = Field(default=8, ge=2, le=64)
    angular_order: int = Field(default=64, ge=4)
    tol: float = Field(default=1e-8, gt=0.0)
    max_refinements: int = Field(default=12, ge=0)

    @model_validator(mode="after")
    def _ordered_radii(self) -> "QuadratureConfig":
        if not self.inner_radius < self.split_radius:
            raise ValueError("inner_radius must be smaller than split_radius")
        if self.outer_radius is not None and self.outer_radius < self.split_radius:
            raise ValueError("outer_radius must be at least split_radius")
        return self

    def sphere(self, n: int) -> tuple:
        """Directions and weights for S^{n-1}."""
        order = self.angular_order if n <= 2 else max(4, self.angular_order // 4)
        return sphere_rule(n, order)


@dataclass
class OperatorResult:
    """Value of the operator with its error budget split by region."""

    value: float
    error: float
    near: float
    middle: float
    tail_bound: float
    outer_radius: float
    evaluations: int


def _second_difference_on_shell(u: ScalarField, x: Array, r: Array, dirs: Array) -> Array:
    w = r[:, None, None] * dirs[None, :, :]
    return u(x + w) + u(x - w) - 2.0 * u(x)


def _shell_integrand(K: KernelSpec, u: ScalarField, x: Array, dirs: Array, weights: Array):
    n = x.size

    def f(r: Array) -> Array:
        w = r[:, None, None] * dirs[None, :, :]
        kern = K(x[None, None, :], w)
        delta = _second_difference_on_shell(u, x, r, dirs)
        return r ** (n - 1) * np.sum(kern * delta * weights, axis=1)

    return f


def _hessian_model(
    K: KernelSpec, u: ScalarField, x: Array, rho: float, dirs: Array, weights: Array
) -> tuple:
    """Exact integral over B_rho of the Hessian quadratic times the homogeneous extension of K."""
    n = x.size
    hess = u.hessian(x)
    quad = np.einsum("ma,ab,mb->m", dirs, hess, dirs)
    kern = K(x[None, :], rho * dirs)
    near = rho ** (n + 2) / (2.0 - K.sigma) * float(np.sum(weights * quad * kern))
    shell = rho ** (n + 1) * float(np.sum(weights * quad * kern))
    magnitude = rho ** (n + 2) / (2.0 - K.sigma) * float(np.sum(weights * np.abs(quad) * kern))
    return near, shell, magnitude


def _tail(K: KernelSpec, u: ScalarField, cfg: QuadratureConfig) -> tuple:
    if u.name in AFFINE_FAMILIES:
        return (cfg.outer_radius or cfg.split_radius), 0.0
    if not math.isfinite(u.sup_bound):
        raise TailBoundError(f"Field '{u.name}' has no finite sup bound; the tail cannot be bounded")
    if u.sup_bound == 0.0:
        return (cfg.outer_radius or cfg.split_radius), 0.0
    constant = 4.0 * u.sup_bound * K.tail_mass(1.0) * K.sigma
    rho_out = cfg.outer_radius or max(
        cfg.split_radius, default_outer_radius(constant, K.sigma, cfg.tol)
    )
    return rho_out, 4.0 * u.sup_bound * K.tail_mass(rho_out)


def apply_operator(
    K: KernelSpec, u: ScalarField, x: Sequence[float], cfg: Optional[QuadratureConfig] = None
) -> OperatorResult:
    """Integral of K(x, w) * (u(x+w) + u(x-w) - 2u(x)) over R^n.

    Args:
        K: Kernel of order sigma.
        u: Bounded field (twice differentiable near x for taylor2).
        x: Evaluation point.
        cfg: Quadrature controls.

    Returns:
        OperatorResult: Value and error estimate.

    Raises:
        QuadratureError: If the middle region misses the tolerance.
        TailBoundError: If the tail bound exceeds the tolerance.
    """
    cfg = cfg or QuadratureConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    dirs, weights = cfg.sphere(K.n)
    rho_in = cfg.inner_radius
    rho_out, tail = _tail(K, u, cfg)
    if tail > cfg.tol:
        raise TailBoundError(
            f"Tail bound {tail:.3e} exceeds tolerance {cfg.tol:.3e}; increase outer_radius",
            best_estimate=None,
            error_estimate=tail,
        )
    f = _shell_integrand(K, u, x, dirs, weights)
    edges = np.concatenate(
        [geometric_edges(rho_in, cfg.split_radius)[:-1], geometric_edges(cfg.split_radius, rho_out)]
    )
    budget = max(cfg.tol - tail, 0.5 * cfg.tol)
    try:
        mid = integrate_radial(f, edges, cfg.radial_order, 0.8 * budget, cfg.max_refinements)
    except QuadratureError as e:
        logger.warning(f"Operator quadrature at x={x.tolist()} failed: {e}")
        raise
    near_model, shell_model, magnitude = _hessian_model(K, u, x, rho_in, dirs, weights)
    if cfg.inner_correction == "taylor2":
        near = near_model
        near_err = rho_in * abs(float(f(np.array([rho_in]))[0]) - shell_model) / (2.0 - K.sigma)
    else:
        near, near_err = 0.0, magnitude
    value = near + float(mid.value)
    error = near_err + float(mid.error) + tail
    return OperatorResult(
        value=value,
        error=error,
        near=near,
        middle=float(mid.value),
        tail_bound=tail,
        outer_radius=rho_out,
        evaluations=mid.evaluations,
    )


def apply_operator_batch(
    K: KernelSpec,
    u: ScalarField,
    points: Array,
    cfg: Optional[QuadratureConfig] = None,
    threads: Optional[int] = None,
) -> List[OperatorResult]:
    """:func:`apply_operator` over many points, in input order."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return parallel_map(lambda p: apply_operator(K, u, p, cfg), list(pts), threads)


def operator_deviation(
    K1: KernelSpec,
    K2: KernelSpec,
    v: ScalarField,
    x: Sequence[float],
    M: float = 1.0,
    cfg: Optional[QuadratureConfig] = None,
) -> OperatorResult:
    """Integral of |K1 - K2| * |second difference of v| at x.

    ``M`` is the constant of the test condition |v| <= M and
    |v(w) - v(x) - (w-x).grad v(x)| <= M |w-x|^2; it bounds the tail.
    """
    cfg = cfg or QuadratureConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    dirs, weights = cfg.sphere(n)
    constant = 4.0 * M * (K1.tail_mass(1.0) + K2.tail_mass(1.0)) * max(K1.sigma, K2.sigma)
    sigma = min(K1.sigma, K2.sigma)
    rho_out = cfg.outer_radius or max(cfg.split_radius, default_outer_radius(constant, sigma, cfg.tol))
    tail = 4.0 * M * (K1.tail_mass(rho_out) + K2.tail_mass(rho_out))

    def f(r: Array) -> Array:
        w = r[:, None, None] * dirs[None, :, :]
        diff = np.abs(K1(x[None, None, :], w) - K2(x[None, None, :], w))
        delta = np.abs(_second_difference_on_shell(v, x, r, dirs))
        return r ** (n - 1) * np.sum(diff * delta * weights, axis=1)

    edges = np.concatenate(
        [geometric_edges(cfg.inner_radius, cfg.split_radius)[:-1], geometric_edges(cfg.split_radius, rho_out)]
    )
    mid = integrate_radial(f, edges, cfg.radial_order, 0.8 * cfg.tol, cfg.max_refinements)
    rho = cfg.inner_radius
    hess = v.hessian(x)
    quad = np.abs(np.einsum("ma,ab,mb->m", dirs, hess, dirs))
    diff = np.abs(K1(x[None, :], rho * dirs) - K2(x[None, :], rho * dirs))
    near = rho ** (n + 2) / (2.0 - sigma) * float(np.sum(weights * quad * diff))
    shell = rho ** (n + 1) * float(np.sum(weights * quad * diff))
    near_err = rho * abs(float(f(np.array([rho]))[0]) - shell) / (2.0 - sigma)
    return OperatorResult(
        value=near + float(mid.value),
        error=near_err + float(mid.error) + tail,
        near=near,
        middle=float(mid.value),
        tail_bound=tail,
        outer_radius=rho_out,
        evaluations=mid.evaluations,
    )


def polar_oracle(
    K: KernelSpec,
    u: ScalarField,
    x: Sequence[float],
    cfg: Optional[QuadratureConfig] = None,
    refinement: int = 10,
) -> float:
    """Brute-force fixed polar grid, ``refinement`` times finer than ``cfg``.

    Non-adaptive: radial panels grow by 2^{1/refinement}, the angular rule
    has ``refinement`` times more points, and the inner radius shrinks by
    the same factor.
    """
    cfg = cfg or QuadratureConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    fine = cfg.model_copy(
        update={
            "angular_order": cfg.angular_order * refinement,
            "inner_radius": cfg.inner_radius / refinement,
        }
    )
    dirs, weights = fine.sphere(n)
    rho_out, _ = _tail(K, u, cfg)
    edges = geometric_edges(fine.inner_radius, rho_out, ratio=2.0 ** (1.0 / refinement))
    nodes, wts = fixed_radial_rule(edges, cfg.radial_order)
    f = _shell_integrand(K, u, x, dirs, weights)
    total = 0.0
    for chunk in np.array_split(np.arange(nodes.size), max(1, nodes.size // 512)):
        total += float(np.sum(f(nodes[chunk]) * wts[chunk]))
    near, _, _ = _hessian_model(K, u, x, fine.inner_radius, dirs, weights)
    return near + total


def gaussian_fractional_laplacian(x: Array, n: int, sigma: float) -> Array:
    """(-Laplacian)^{sigma/2} of exp(-|x|^2), via the confluent hypergeometric function."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    prefactor = 2.0**sigma * math.gamma(0.5 * (n + sigma)) / math.gamma(0.5 * n)
    return prefactor * special.hyp1f1(0.5 * (n + sigma), 0.5 * n, -r2)


def gaussian_operator_value(x: Array, n: int, sigma: float, normalization: str = "scaled") -> Array:
    """Exact integral of scale/|w|^{n+sigma} times the second difference of exp(-|x|^2)."""
    scale = normalization_scale(n, sigma, normalization)
    c = fractional_laplacian_constant(n, sigma)
    return -scale * (2.0 / c) * gaussian_fractional_laplacian(x, n, sigma)
