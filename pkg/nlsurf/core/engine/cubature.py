"""Radial and spherical quadrature shared by every singular integral.

Radial integrals use geometric panels with an embedded Gauss-Legendre pair
(orders m and 2m); the difference of the pair is the panel error estimate and
panels are bisected until the total estimate meets the tolerance.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy import special

from nlsurf.core.errors import QuadratureError

logger = logging.getLogger("nlsurf.cubature")

Array = np.ndarray
RadialIntegrand = Callable[[Array], Array]


@lru_cache(maxsize=32)
def gauss_legendre(order: int) -> Tuple[Array, Array]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = special.roots_legendre(order)
    return 0.5 * (x + 1.0), 0.5 * w


def sphere_area(n: int) -> float:
    """Measure of the unit sphere S^{n-1} (counting measure 2 for n = 1)."""
    return 2.0 * math.pi ** (0.5 * n) / math.gamma(0.5 * n)


@lru_cache(maxsize=32)
def sphere_rule(n: int, order: int) -> Tuple[Array, Array]:
    """Quadrature on S^{n-1} that is symmetric under theta -> -theta.

    n = 1 uses the two points +-1; n = 2 a half-step offset trapezoid with
    ``order`` points (even); n = 3 Gauss-Legendre in cos(theta) times a
    trapezoid with 2*order points in the azimuth.
    """
    if n == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if n == 2:
        m = order + (order % 2)
        ang = (np.arange(m) + 0.5) * (2.0 * math.pi / m)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1), np.full(m, 2.0 * math.pi / m)
    if n == 3:
        z, wz = special.roots_legendre(order)
        m = 2 * order
        az = (np.arange(m) + 0.5) * (2.0 * math.pi / m)
        zz, aa = np.meshgrid(z, az, indexing="ij")
        rho = np.sqrt(1.0 - zz**2)
        dirs = np.stack([rho * np.cos(aa), rho * np.sin(aa), zz], axis=-1).reshape(-1, 3)
        weights = (wz[:, None] * np.full(m, 2.0 * math.pi / m)[None, :]).reshape(-1)
        return dirs, weights
    raise ValueError(f"Sphere rules are available for n <= 3, got {n}")


def geometric_edges(r_min: float, r_max: float, ratio: float = 2.0) -> Array:
    """Panel edges from r_min to r_max growing by ``ratio``."""
    if r_min <= 0:
        raise ValueError("Geometric panels need r_min > 0")
    count = max(1, int(math.ceil(math.log(r_max / r_min) / math.log(ratio))))
    return np.geomspace(r_min, r_max, count + 1)


def half_line_edges(start: float, first_width: float, r_max: float) -> Array:
    """Edges start + first_width * (2^k - 1) up to start + r_max."""
    edges = [start]
    width = first_width
    while edges[-1] - start < r_max:
        edges.append(edges[-1] + width)
        width *= 2.0
    return np.asarray(edges)


def tensor_gauss(lo: Sequence[float], hi: Sequence[float], order: int) -> Tuple[Array, Array]:
    """Tensor Gauss-Legendre rule on the box [lo, hi]."""
    x, w = gauss_legendre(order)
    axes, wts = [], []
    for a, b in zip(lo, hi):
        axes.append(a + (b - a) * x)
        wts.append((b - a) * w)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    weights = np.ones(1)
    for wt in wts:
        weights = np.multiply.outer(weights, wt).reshape(-1)
    return pts, weights


@dataclass
class RadialResult:
    """Outcome of :func:`integrate_radial`.

    ``value`` and ``error`` are arrays when the integrand is vector valued.
    """

    value: Array
    error: Array
    edges: Array
    evaluations: int


def _panel_nodes(a: Array, b: Array, order: int) -> Tuple[Array, Array]:
    x, w = gauss_legendre(order)
    width = (b - a)[:, None]
    return a[:, None] + width * x[None, :], width * w[None, :]


def integrate_radial(
    f: RadialIntegrand,
    edges: Array,
    order: int = 8,
    tol: float = 1e-8,
    max_refinements: int = 12,
    raise_on_failure: bool = True,
) -> RadialResult:
    """Integrate ``f`` over [edges[0], edges[-1]] with adaptive panel bisection.

    Args:
        f: Integrand taking radii of shape (m,) and returning (m,) or (k, m).
        edges: Initial panel edges, increasing.
        order: Base Gauss order; the error estimate compares it with 2*order.
        tol: Absolute tolerance on the summed error estimate (per component).
        max_refinements: Bisection sweeps allowed.
        raise_on_failure: Raise QuadratureError instead of returning the best estimate.

    Returns:
        RadialResult: Integral, error estimate, final edges and evaluation count.

    Raises:
        QuadratureError: If the tolerance is not met and ``raise_on_failure``.
    """
    a = np.asarray(edges[:-1], dtype=float)
    b = np.asarray(edges[1:], dtype=float)
    done_val: List[Tuple[float, Array, Array]] = []
    evaluations = 0
    sweep = 0
    while True:
        lo_nodes, lo_w = _panel_nodes(a, b, order)
        hi_nodes, hi_w = _panel_nodes(a, b, 2 * order)
        flat = np.concatenate([lo_nodes.ravel(), hi_nodes.ravel()])
        vals = np.asarray(f(flat), dtype=float)
        evaluations += flat.size
        vector = vals.ndim == 2
        vals2 = vals if vector else vals[None, :]
        split = lo_nodes.size
        q_lo = np.sum(vals2[:, :split].reshape(vals2.shape[0], *lo_nodes.shape) * lo_w, axis=-1)
        q_hi = np.sum(vals2[:, split:].reshape(vals2.shape[0], *hi_nodes.shape) * hi_w, axis=-1)
        err = np.abs(q_hi - q_lo)
        panel_err = np.max(err, axis=0)
        settled_err = sum(float(np.max(e)) for _, _, e in done_val) if done_val else 0.0
        budget = max(tol - settled_err, 0.0)
        total_err = float(np.max(np.sum(err, axis=1))) + settled_err
        if total_err <= tol or sweep >= max_refinements:
            for i in range(a.size):
                done_val.append((float(a[i]), q_hi[:, i], err[:, i]))
            break
        threshold = budget / max(a.size, 1)
        refine = panel_err > threshold
        for i in np.nonzero(~refine)[0]:
            done_val.append((float(a[i]), q_hi[:, i], err[:, i]))
        ra, rb = a[refine], b[refine]
        mid = np.where(ra > 0, np.sqrt(ra * rb), 0.5 * (ra + rb))
        a = np.concatenate([ra, mid])
        b = np.concatenate([mid, rb])
        order_idx = np.argsort(a)
        a, b = a[order_idx], b[order_idx]
        sweep += 1
        logger.debug(f"radial sweep {sweep}: refining {int(np.sum(refine))} panels")
    done_val.sort(key=lambda item: item[0])
    values = np.sum(np.stack([v for _, v, _ in done_val], axis=1), axis=1)
    errors = np.sum(np.stack([e for _, _, e in done_val], axis=1), axis=1)
    final_edges = np.array(sorted({d[0] for d in done_val} | {float(edges[-1])}))
    value_out = values if vector else values[0]
    error_out = errors if vector else errors[0]
    if float(np.max(errors)) > tol and raise_on_failure:
        raise QuadratureError(
            f"Radial quadrature missed tolerance {tol:.3e} (estimate {float(np.max(errors)):.3e})",
            best_estimate=float(np.ravel(value_out)[0]),
            error_estimate=float(np.max(errors)),
        )
    return RadialResult(value=value_out, error=error_out, edges=final_edges, evaluations=evaluations)


def fixed_radial_rule(edges: Array, order: int) -> Tuple[Array, Array]:
    """Non-adaptive Gauss rule on the given panels (nodes, weights)."""
    nodes, weights = _panel_nodes(np.asarray(edges[:-1]), np.asarray(edges[1:]), order)
    return nodes.ravel(), weights.ravel()


def power_law_head(f_at_rho: Array, rho: float, exponent: float) -> Array:
    """Integral over [0, rho] of f(rho) * (r/rho)^exponent."""
    if exponent <= -1.0:
        raise QuadratureError(f"Near-field exponent {exponent} is not integrable")
    return rho * np.asarray(f_at_rho) / (exponent + 1.0)


def power_law_head_error(f_rho: Array, f_half: Array, rho: float, exponent: float) -> Array:
    """Error estimate of :func:`power_law_head` from the mismatch at rho/2."""
    predicted = np.asarray(f_rho) * 0.5**exponent
    return rho * np.abs(np.asarray(f_half) - predicted) / (exponent + 1.0)


def default_outer_radius(tail_constant: float, sigma: float, tol: float) -> float:
    """Radius where tail_constant * rho^{-sigma} / sigma drops below tol/10."""
    return float((10.0 * tail_constant / (sigma * tol)) ** (1.0 / sigma))
