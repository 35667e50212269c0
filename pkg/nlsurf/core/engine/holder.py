"""Sampled scaled Holder norms and the ball-covering inequality.

Every norm here is a lower-bound estimator: sups over a nested
low-discrepancy sample, so more density never lowers a term.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial import cKDTree
from scipy.stats import qmc

from nlsurf.core.engine.fields import MultiIndex, ScalarField, multi_indices
from nlsurf.core.engine.kernels import mixed_derivative
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import CoverError, DerivativeError
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.holder")

Array = np.ndarray

BASE_POINTS = 256
PROBES = 64
# Seminorm growth per density doubling above which a term is flagged as diverging.
DIVERGENCE_GROWTH = 1.05
# Largest relative change of the interpolation constant under density doubling.
INTERP_DRIFT_TOL = 0.1


class HolderReport(BaseModel):
    """Terms of ||u||*_{C^{m,alpha}(B_r(x))}.

    ``terms`` maps ``order_j`` to r^j sup|D^j u| and ``seminorm`` to
    r^{m+alpha} [D^m u]_alpha.
    """

    m: int = Field(ge=0)
    alpha: float = Field(gt=0.0, lt=1.0)
    center: List[float]
    radius: float = Field(gt=0.0)
    terms: Dict[str, float]
    total: float
    points: int
    pairs: int
    diverging: bool = False

    @model_validator(mode="after")
    def _consistent_total(self) -> "HolderReport":
        if any(v < 0 for v in self.terms.values()):
            raise ValueError("Holder norm terms must be non-negative")
        expected = sum(self.terms.values())
        if abs(expected - self.total) > 1e-12 * max(1.0, abs(expected)):
            raise ValueError(f"total {self.total} differs from the sum of terms {expected}")
        return self

    def to_rows(self, prefix: str = "") -> List[CheckRow]:
        extra = {"m": float(self.m), "alpha": self.alpha, "r": self.radius}
        rows = [CheckRow.info(f"{prefix}{name}", value, **extra) for name, value in self.terms.items()]
        rows.append(CheckRow.info(f"{prefix}total", self.total, **extra))
        return rows


def ball_sample(center: Sequence[float], r: float, count: int, seed: int = 0) -> Array:
    """First ``count`` points of a scrambled Sobol sequence falling in B_r(center).

    The center and the 2d axis points on the sphere come first. For a fixed
    seed a larger ``count`` returns a superset.
    """
    c = np.asarray(center, dtype=float).reshape(-1)
    d = c.size
    fixed = [np.zeros(d)]
    for a in range(d):
        e = np.zeros(d)
        e[a] = 1.0
        fixed.extend([e, -e])
    volume_ratio = math.pi ** (d / 2) / math.gamma(d / 2 + 1) / 2.0**d
    needed = int(math.ceil(2.0 * count / volume_ratio))
    cloud = 2.0 * qmc.Sobol(d=d, scramble=True, seed=seed).random_base2(max(1, math.ceil(math.log2(needed)))) - 1.0
    cloud = cloud[np.linalg.norm(cloud, axis=1) < 1.0]
    unit = np.vstack([np.array(fixed), cloud])[:count]
    return c + r * unit


def _fd_derivative(u: ScalarField, gamma: MultiIndex, pts: Array, step: float) -> Array:
    coarse = mixed_derivative(u, pts, gamma, np.full(pts.shape, step))
    fine = mixed_derivative(u, pts, gamma, np.full(pts.shape, 0.5 * step))
    gap = np.abs(coarse - fine)
    if np.any(gap > 1e-4 * (1.0 + np.abs(fine))):
        worst = int(np.argmax(gap))
        raise DerivativeError(
            f"Finite-difference derivative {gamma} of '{u.name}' is unstable at {pts[worst].tolist()}: "
            f"step halving changes it by {gap[worst]:.3e}"
        )
    return fine


def derivative_values(u: ScalarField, gamma: MultiIndex, pts: Array, step: float) -> Array:
    """D^gamma u at points: exact when the field knows it, else checked differences.

    Raises:
        DerivativeError: If the finite differences fail the step-halving check.
    """
    try:
        return np.asarray(u.derivative(gamma, pts), dtype=float).reshape(pts.shape[0])
    except NotImplementedError:
        return _fd_derivative(u, gamma, pts, step)


def _probe_pairs(values: Array, count: int) -> Array:
    order = np.argsort(values)
    half = min(count // 2, values.size // 2)
    probes = np.unique(np.concatenate([order[:half], order[-half:]]))
    i, j = np.triu_indices(probes.size, k=1)
    return np.stack([probes[i], probes[j]], axis=1)


def _pair_set(pts: Array, values: Array, r: float) -> Array:
    """Nested pair set: consecutive pairs, short pairs and probe pairs per dyadic level."""
    n_pts = pts.shape[0]
    chunks = [np.stack([np.arange(0, n_pts - 1, 2), np.arange(1, n_pts, 2)], axis=1)]
    tree = cKDTree(pts)
    close = tree.query_pairs(0.1 * r, output_type="ndarray")
    if close.size:
        chunks.append(close)
    level = BASE_POINTS
    while True:
        top = min(level, n_pts)
        chunks.append(_probe_pairs(values[:top], PROBES))
        if top == n_pts:
            break
        level *= 2
    pairs = np.unique(np.sort(np.vstack(chunks), axis=1), axis=0)
    return pairs[pairs[:, 0] != pairs[:, 1]]


def _seminorm(pts: Array, values: Array, pairs: Array, alpha: float) -> float:
    if pairs.size == 0:
        return 0.0
    dist = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    ok = dist > 0
    ratio = np.abs(values[pairs[ok, 0]] - values[pairs[ok, 1]]) / dist[ok] ** alpha
    return float(np.max(ratio)) if ratio.size else 0.0


def _raw_terms(
    u: ScalarField, m: int, alpha: float, center: Sequence[float], r: float, density: float, seed: int
) -> Tuple[List[float], float, int, int, bool]:
    """sup|D^j u| for j <= m, [D^m u]_alpha, sample sizes and the divergence flag."""
    count = max(BASE_POINTS, int(2 ** math.ceil(math.log2(max(1.0, 1024.0 * density)))))
    pts = ball_sample(center, r, count, seed)
    step = 1e-3 * max(r, 1e-6)
    sups: List[float] = []
    for j in range(m + 1):
        sups.append(
            max(float(np.max(np.abs(derivative_values(u, g, pts, step)))) for g in multi_indices(u.dim, j))
        )
    semi, pair_count, diverging = 0.0, 0, False
    for g in multi_indices(u.dim, m):
        vals = derivative_values(u, g, pts, step)
        history = []
        level = BASE_POINTS
        while level <= count:
            sub_pts, sub_vals = pts[:level], vals[:level]
            pairs = _pair_set(sub_pts, sub_vals, r)
            history.append(_seminorm(sub_pts, sub_vals, pairs, alpha))
            level *= 2
        pair_count += int(pairs.shape[0])
        semi = max(semi, max(history))
        if len(history) >= 3 and history[-3] > 0:
            growth = [history[i + 1] / history[i] for i in range(len(history) - 3, len(history) - 1)]
            diverging = diverging or all(gr > DIVERGENCE_GROWTH for gr in growth)
    return sups, semi, int(pts.shape[0]), pair_count, diverging


def scaled_holder_norm(
    u: ScalarField,
    m: int,
    alpha: float,
    center: Sequence[float],
    r: float,
    density: float = 1.0,
    seed: int = 0,
) -> HolderReport:
    """Sampled ||u||*_{C^{m,alpha}(B_r(x))} = sum_j r^j ||D^j u|| + r^{m+alpha} [D^m u]_alpha.

    ||D^j u|| is the largest sup over partial derivatives of order j. The
    seminorm uses at least 10^3 pairs; ``diverging`` is set when it keeps
    growing under density doubling.

    Raises:
        DerivativeError: If finite-difference derivatives are unstable.
    """
    sups, semi, points, pairs, diverging = _raw_terms(u, m, alpha, center, r, density, seed)
    terms = {f"order_{j}": r**j * sups[j] for j in range(m + 1)}
    terms["seminorm"] = r ** (m + alpha) * semi
    if diverging:
        logger.warning(f"Seminorm of order {m} for '{u.name}' grows with density: u is likely not C^{{{m},{alpha}}}")
    return HolderReport(
        m=m,
        alpha=alpha,
        center=[float(v) for v in np.asarray(center, dtype=float).reshape(-1)],
        radius=r,
        terms=terms,
        total=float(sum(terms.values())),
        points=points,
        pairs=pairs,
        diverging=diverging,
    )


def holder_norm(
    u: ScalarField, m: int, alpha: float, center: Sequence[float], r: float, density: float = 1.0, seed: int = 0
) -> float:
    """Unscaled ||u||_{C^{m,alpha}(B_r(x))} on the same sample."""
    sups, semi, _, _, _ = _raw_terms(u, m, alpha, center, r, density, seed)
    return float(sum(sups) + semi)


def interpolation_constant(
    u: ScalarField,
    delta: float,
    beta: float,
    center: Sequence[float],
    r: float,
    density: float = 1.0,
    seed: int = 0,
) -> float:
    """Smallest C with ||u||_{C^2} <= delta ||u||_{C^{2,beta}} + C ||u||_inf on the sample."""
    sups, semi, _, _, _ = _raw_terms(u, 2, beta, center, r, density, seed)
    c2 = float(sum(sups))
    gap = c2 - delta * (c2 + semi)
    if sups[0] == 0.0:
        return 0.0 if gap <= 0 else math.inf
    return max(0.0, gap / sups[0])


def interpolation_check(
    u: ScalarField,
    deltas: Sequence[float],
    beta: float,
    center: Sequence[float],
    r: float,
    density: float = 1.0,
    seed: int = 0,
    tol: float = INTERP_DRIFT_TOL,
) -> Report:
    """interp[delta] at ``density`` and its relative drift when the density doubles.

    A constant that moves by more than ``tol`` or is not finite fails.
    """
    report = Report(command="interpolation", metadata={"beta": str(beta), "radius": str(r)})
    for delta in deltas:
        coarse = interpolation_constant(u, delta, beta, center, r, density, seed)
        fine = interpolation_constant(u, delta, beta, center, r, 2.0 * density, seed)
        change = abs(fine - coarse) if math.isfinite(coarse) and math.isfinite(fine) else math.inf
        drift = change / coarse if coarse > 0.0 else change
        report.add(CheckRow.info(f"interp[{delta:g}]", coarse, change))
        report.add(CheckRow.bound(f"interp_drift[{delta:g}]", drift, tol))
    return report


def grid_cover(center: Sequence[float], rho: float, fraction: float = 0.01) -> Tuple[Array, float]:
    """Centers of balls of radius fraction * rho covering B_rho(center).

    Cubes of side 2 * radius / sqrt(d) tile the bounding box; those that meet
    the ball keep their centers.
    """
    c = np.asarray(center, dtype=float).reshape(-1)
    d = c.size
    radius = fraction * rho
    side = 2.0 * radius / math.sqrt(d)
    cells = int(math.ceil(2.0 * rho / side))
    ticks = -rho + side * (np.arange(cells) + 0.5)
    grid = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.linalg.norm(grid, axis=1) <= rho + 0.5 * side * math.sqrt(d)
    return c + grid[keep], radius


def verify_cover(center: Sequence[float], rho: float, centers: Array, radius: float) -> None:
    """Check that the balls B_radius(centers) cover B_rho(center) on a fine test grid.

    Raises:
        CoverError: If a test point lies outside every ball.
    """
    c = np.asarray(center, dtype=float).reshape(-1)
    d = c.size
    spacing = 0.25 * radius
    ticks = np.arange(-rho, rho + 0.5 * spacing, spacing)
    test = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    test = test[np.linalg.norm(test, axis=1) <= rho] + c
    dist, _ = cKDTree(np.asarray(centers, dtype=float).reshape(-1, d)).query(test)
    gap = dist > radius * (1.0 + 1e-9)
    if np.any(gap):
        raise CoverError(
            f"{int(np.sum(gap))} test points of B_{rho}({c.tolist()}) lie outside every ball, "
            f"first at {test[int(np.argmax(gap))].tolist()}"
        )


def covering_constant(m: int) -> float:
    return 200.0 * 10.0**m


def covering_inequality_check(
    u: ScalarField,
    m: int,
    alpha: float,
    rho: float,
    centers: Array,
    center: Optional[Sequence[float]] = None,
    cover_radius: Optional[float] = None,
    density: float = 1.0,
    seed: int = 0,
    threads: Optional[int] = None,
) -> Report:
    """||u||*(B_rho) <= C_o * sum_k ||u||*(B_{10 r_c}(x_k)) with C_o = 200 * 10^m.

    The balls B_{r_c}(x_k), r_c = rho/100 unless given, must cover B_rho.
    The left side uses four times the density of the right side.

    Raises:
        CoverError: If the balls do not cover B_rho, before any norm is computed.
    """
    pts = np.asarray(centers, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    c = np.zeros(pts.shape[1]) if center is None else np.asarray(center, dtype=float).reshape(-1)
    rc = cover_radius if cover_radius is not None else rho / 100.0
    verify_cover(c, rho, pts, rc)
    lhs = scaled_holder_norm(u, m, alpha, c, rho, 4.0 * density, seed)

    def ball_norm(xk: Array) -> float:
        return scaled_holder_norm(u, m, alpha, xk, 10.0 * rc, density, seed).total

    parts = parallel_map(ball_norm, list(pts), threads)
    rhs = float(sum(parts))
    C_o = covering_constant(m)
    report = Report(
        command="norms",
        metadata={"m": str(m), "alpha": str(alpha), "rho": str(rho), "balls": str(pts.shape[0])},
    )
    report.extend(Report(command="norms", rows=lhs.to_rows("lhs:")))
    report.add(CheckRow.info("rhs_sum", rhs, balls=float(pts.shape[0])))
    ratio = lhs.total / (C_o * rhs) if rhs > 0 else (0.0 if lhs.total == 0 else math.inf)
    row = report.add(CheckRow.bound("covering_ratio", ratio, 1.0, C_o=C_o))
    if not row.passed:
        logger.warning(f"Covering inequality violated: ratio {ratio:.3e} with C_o = {C_o:g}")
    return report
