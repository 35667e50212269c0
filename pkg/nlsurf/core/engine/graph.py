"""Graph reformulation of the nonlocal curvature of a subgraph.

For E = {x_n < u(x')} the windowed curvature becomes an (n-1)-dimensional
integral of F(difference quotient). Splitting it with the coefficient
a = F(q)/q gives a kernel K_R of order 1 + s acting on u, a smooth far
field Psi_R and a remainder A_R.

Orientation used throughout: ``a_minus(w') = coefficient_a(x', w')`` pairs
with u(x' - w') - u(x') and ``a_plus(w') = coefficient_a(x', -w')`` with
u(x' + w') - u(x'); A_R integrates U * (a_plus - a_minus).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from nlsurf.core.engine.cubature import (
    geometric_edges,
    integrate_radial,
    power_law_head,
    power_law_head_error,
    sphere_area,
    sphere_rule,
)
from nlsurf.core.engine.fields import F_closed_form, GraphWindow, ScalarField, U_remainder
from nlsurf.core.engine.geometry import (
    GeometryConfig,
    IntegralEstimate,
    LatticeSet,
    far_field_bound,
    far_field_estimate,
    subgraph_set,
    windowed_curvature_estimate,
)
from nlsurf.core.engine.kernels import KernelSpec, derivative_constants
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import ContainmentError, DegenerateSampleError, NonlocalError, SlowDecayError
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.graph")

Array = np.ndarray

NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class GraphProblem:
    """A graph u on R^{n-1}, the order s and the window radius.

    Attributes:
        u: Field on R^{n-1} carrying its gradient.
        s: Order in (0, 1).
        window: Cutoffs of radius R (or r <= R/2).
        n: Ambient dimension.
        beta: C^{1,beta} class of u, used by the A_R near-field bound.
    """

    u: ScalarField
    s: float
    window: GraphWindow
    n: int
    beta: float = 1.0
    inner_radius: float = 1e-4
    tol: float = 1e-8
    angular_order: int = 64
    max_refinements: int = 40
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def __post_init__(self) -> None:
        if self.n < 2:
            raise NonlocalError(f"Graph problems need n >= 2, got {self.n}")
        if self.u.dim != self.n - 1:
            raise NonlocalError(f"Graph must live on R^{self.n - 1}, got dimension {self.u.dim}")
        if not 0.0 < self.s < 1.0:
            raise NonlocalError(f"s must lie in (0, 1), got {self.s}")

    @property
    def d(self) -> int:
        return self.n - 1

    @property
    def R(self) -> float:
        return self.window.R

    @property
    def sigma(self) -> float:
        return 1.0 + self.s

    def sphere(self, angular_order: Optional[int] = None) -> Tuple[Array, Array]:
        order = angular_order or self.angular_order
        return sphere_rule(self.d, order if self.d <= 2 else max(4, order // 4))

    def surface_point(self, x_prime: Sequence[float]) -> Array:
        xp = np.asarray(x_prime, dtype=float).reshape(-1)
        return np.concatenate([xp, [float(self.u(xp))]])

    def subgraph(self, h: Optional[float] = None) -> LatticeSet:
        """The subgraph as a lattice set on [-2R, 2R]^{n-1} x [-R, R]."""
        step = h or self.R / 8.0
        lower = [-2.0 * self.R] * self.d + [-self.R]
        upper = [2.0 * self.R] * self.d + [self.R]
        return subgraph_set(self.u, lower, upper, step)


def _check_window_point(P: GraphProblem, xp: Array) -> None:
    if np.linalg.norm(xp) >= P.R / 2.0:
        raise ContainmentError(f"x' = {xp.tolist()} lies outside B_(R/2) with R = {P.R}")


def _q(P: GraphProblem, xp: Array, w: Array) -> Array:
    r = np.linalg.norm(w, axis=-1)
    return (P.u(xp - w) - P.u(xp)) / r


def _a_of_q(q: Array, n: int, s: float) -> Array:
    q = np.asarray(q, dtype=float)
    small = np.abs(q) <= 1e-8
    safe = np.where(small, 1.0, q)
    return np.where(small, 1.0 - (n + s) * q * q / 6.0, F_closed_form(safe, n, s) / safe)


def coefficient_a(P: GraphProblem, x_prime: Array, w_prime: Array) -> Array:
    """Integral over t in [0, 1] of p(t q), q = (u(x' - w') - u(x')) / |w'|.

    Equals F(q)/q, and 1 - (n+s) q^2 / 6 when |q| <= 1e-8.
    """
    xp = np.asarray(x_prime, dtype=float)
    w = np.asarray(w_prime, dtype=float)
    return _a_of_q(_q(P, xp, w), P.n, P.s)


def kernel_KR(P: GraphProblem, x_prime: Array, w_prime: Array) -> Array:
    """[a(x', w') + a(x', -w')] zeta_R(w') / (2 |w'|^{n+s})."""
    xp = np.asarray(x_prime, dtype=float)
    w = np.asarray(w_prime, dtype=float)
    r = np.linalg.norm(w, axis=-1)
    a_sum = coefficient_a(P, xp, w) + coefficient_a(P, xp, -w)
    return a_sum * P.window.zeta(w) / (2.0 * r ** (P.n + P.s))


def lipschitz_bound(P: GraphProblem, radius: float) -> float:
    """Sampled sup of |grad u| over B_radius."""
    d = P.d
    grid = np.linspace(-radius, radius, 201 if d == 1 else 41)
    pts = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = pts[np.linalg.norm(pts, axis=1) <= radius]
    return float(np.max(np.linalg.norm(P.u.gradient(pts), axis=-1)))


def graph_kernel_spec(P: GraphProblem, x_radius: float = 1.0) -> KernelSpec:
    """K_R as a kernel of order 1 + s on R^{n-1} with a0 = 1/(1-s).

    The closeness constant follows from a >= F(L)/L, L the Lipschitz bound
    of u on B_{x_radius + R}.
    """
    d, s = P.d, P.s
    L = lipschitz_bound(P, x_radius + P.R)
    a_min = float(_a_of_q(np.array(L), P.n, s))
    a0 = 1.0 / (1.0 - s)
    return KernelSpec(
        n=d,
        sigma=P.sigma,
        func=lambda x, w: kernel_KR(P, x, w),
        a0=lambda w: np.full(np.shape(w)[:-1], a0),
        c0=a0,
        C0=1.0,
        r0=P.R / 4.0,
        eta=(1.0 - a_min) / (1.0 - s) + 1e-9,
        Ck=tuple(4.0 * c for c in derivative_constants(d, P.sigma, 1.0)),
        lam=a_min * a0 * (1.0 - 1e-9),
        Lam=a0,
        normalization="scaled",
        name="graph_KR",
    )


def _radial(
    P: GraphProblem,
    f,
    r_hi: float,
    exponent: float,
    tol: Optional[float] = None,
) -> Tuple[Array, Array]:
    """Near power-law head on [0, rho] plus adaptive panels on [rho, r_hi]."""
    rho = min(P.inner_radius, 0.5 * r_hi)
    f_rho = np.asarray(f(np.array([rho])))[..., 0]
    f_half = np.asarray(f(np.array([0.5 * rho])))[..., 0]
    head = power_law_head(f_rho, rho, exponent)
    head_err = power_law_head_error(f_rho, f_half, rho, exponent)
    res = integrate_radial(f, geometric_edges(rho, r_hi), 8, tol or P.tol, P.max_refinements)
    return np.asarray(head + res.value), np.asarray(head_err + res.error)


def graph_curvature_estimate(
    P: GraphProblem, x_prime: Sequence[float], angular_order: Optional[int] = None
) -> IntegralEstimate:
    """2 * integral of F((u(x'-w') - u(x')) / |w'|) zeta_R(w') / |w'|^{n-1+s}.

    Raises:
        ContainmentError: If x' is outside B_{R/2}.
    """
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    _check_window_point(P, xp)
    dirs, weights = P.sphere(angular_order)

    def f(r: Array) -> Array:
        w = r[:, None, None] * dirs[None, :, :]
        vals = F_closed_form(_q(P, xp, w), P.n, P.s) * P.window.zeta(w)
        return 2.0 * r ** (-1.0 - P.s) * np.sum(vals * weights, axis=1)

    value, error = _radial(P, f, 0.5 * P.R, -P.s)
    return IntegralEstimate(value=float(value), error=float(error))


def graph_curvature(P: GraphProblem, x_prime: Sequence[float]) -> float:
    """Value of :func:`graph_curvature_estimate`."""
    return graph_curvature_estimate(P, x_prime).value


def far_field_psi_estimate(P: GraphProblem, x: Sequence[float]) -> IntegralEstimate:
    """Psi_R(x) on the subgraph set, for any x in R^n."""
    return far_field_estimate(P.subgraph(), x, P.window, P.s, P.geometry)


def far_field_psi(P: GraphProblem, x: Sequence[float]) -> float:
    """Value of :func:`far_field_psi_estimate`."""
    return far_field_psi_estimate(P, x).value


def far_field_psi_bound(P: GraphProblem) -> float:
    """Integral of |1 - eta_R(z)| |z|^{-n-s}, which dominates |Psi_R|."""
    return far_field_bound(P.window, P.n, P.s, P.geometry)


def _pair_terms(P: GraphProblem, xp: Array, w: Array) -> dict:
    """Pointwise factors shared by the decomposition integrands."""
    r = np.linalg.norm(w, axis=-1)
    u0 = float(P.u(xp))
    u_minus = P.u(xp - w) - u0
    u_plus = P.u(xp + w) - u0
    a_minus = _a_of_q(u_minus / r, P.n, P.s)
    a_plus = _a_of_q(u_plus / r, P.n, P.s)
    grad = P.u.gradient(xp)
    linear = np.sum(w * grad, axis=-1)
    return {
        "u_minus": u_minus,
        "u_plus": u_plus,
        "a_minus": a_minus,
        "a_plus": a_plus,
        "linear": linear,
        "remainder": u_minus + linear,
        "weight": P.window.zeta(w) / r ** (P.n + P.s),
    }


def _a_remainder_integrand(P: GraphProblem, xp: Array, dirs: Array, weights: Array):
    d = P.d

    def f(r: Array) -> Array:
        w = r[:, None, None] * dirs[None, :, :]
        t = _pair_terms(P, xp, w)
        vals = t["remainder"] * (t["a_plus"] - t["a_minus"]) * t["weight"]
        return r ** (d - 1) * np.sum(vals * weights, axis=1)

    return f


def _remainder_near_bound(P: GraphProblem, xp: Array, dirs: Array, rho: float) -> float:
    """Bound of the A_R integrand over B_rho from C |w'|^{2 beta + 1}.

    Raises:
        SlowDecayError: If the sampled decay exponent gives 2 beta <= s.
    """

    def peak(r: float) -> float:
        t = _pair_terms(P, xp, r * dirs)
        return float(np.max(np.abs(t["remainder"] * (t["a_plus"] - t["a_minus"]))))

    g_rho, g_small = peak(rho), peak(0.25 * rho)
    if g_rho > NOISE_FLOOR and g_small > NOISE_FLOOR:
        exponent = math.log(g_rho / g_small) / math.log(4.0)
        beta_emp = 0.5 * (exponent - 1.0)
        if 2.0 * beta_emp <= P.s:
            raise SlowDecayError(
                f"A_R integrand decays like |w'|^{exponent:.3f}: beta <= s/2, the remainder does not converge"
            )
    gain = 2.0 * P.beta - P.s
    C = g_rho / rho ** (2.0 * P.beta + 1.0)
    return C * sphere_area(P.d) * rho**gain / gain


def remainder_Ar_estimate(
    P: GraphProblem,
    x_prime: Sequence[float],
    angular_order: Optional[int] = None,
    tol: Optional[float] = None,
) -> IntegralEstimate:
    """A_R(x') = integral of U(x', w') [a_plus - a_minus] zeta_R(w') / |w'|^{n+s}.

    The ball |w'| < rho_in contributes zero with its bound in the error.

    Raises:
        SlowDecayError: If beta <= s/2, declared or observed.
    """
    if 2.0 * P.beta <= P.s:
        raise SlowDecayError(f"beta = {P.beta} <= s/2 = {P.s / 2}: A_R does not converge")
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    dirs, weights = P.sphere(angular_order)
    rho = min(P.inner_radius, 0.25 * P.R)
    near_err = _remainder_near_bound(P, xp, dirs, rho)
    f = _a_remainder_integrand(P, xp, dirs, weights)
    res = integrate_radial(f, geometric_edges(rho, 0.5 * P.R), 8, tol or P.tol, P.max_refinements)
    return IntegralEstimate(value=float(res.value), error=float(res.error) + near_err)


def remainder_Ar(P: GraphProblem, x_prime: Sequence[float]) -> float:
    """Value of :func:`remainder_Ar_estimate`."""
    return remainder_Ar_estimate(P, x_prime).value


def check_graph_identity(P: GraphProblem, x: Sequence[float], tol: float = 1e-3) -> Report:
    """Windowed curvature of the subgraph against the graph-side integral at one point.

    ``x`` may be a surface point in R^n or its projection x' in R^{n-1}.
    """
    pt = np.asarray(x, dtype=float).reshape(-1)
    if pt.size == P.d:
        pt = P.surface_point(pt)
    E = P.subgraph()
    set_side = windowed_curvature_estimate(E, pt, P.window, P.s, P.geometry)
    graph_side = graph_curvature_estimate(P, pt[:-1])
    label = ",".join(format(v, ".6g") for v in pt[:-1])
    report = Report(command="identity", metadata={"n": str(P.n), "s": str(P.s), "R": str(P.R)})
    extra = {f"x{i + 1}": float(v) for i, v in enumerate(pt[:-1])}
    report.add(CheckRow.info(f"set_side[{label}]", set_side.value, set_side.error, **extra))
    report.add(CheckRow.info(f"graph_side[{label}]", graph_side.value, graph_side.error, **extra))
    report.add(
        CheckRow.bound(
            f"residual[{label}]",
            abs(set_side.value - graph_side.value),
            tol,
            set_side.error + graph_side.error,
            **extra,
        )
    )
    report.add(CheckRow.bound(f"set_side_error[{label}]", set_side.error, 0.5 * tol, **extra))
    report.add(CheckRow.bound(f"graph_side_error[{label}]", graph_side.error, 0.5 * tol, **extra))
    if not report.passed:
        logger.warning(f"Graph identity fails at x'={label}: {[r.label for r in report.failures]}")
    return report


def check_graph_identity_batch(
    P: GraphProblem, points: Sequence[Sequence[float]], tol: float = 1e-3, threads: Optional[int] = None
) -> Report:
    """:func:`check_graph_identity` over several points, merged in input order."""
    merged = Report(command="identity", metadata={"n": str(P.n), "s": str(P.s), "R": str(P.R)})
    for part in parallel_map(lambda p: check_graph_identity(P, p, tol), list(points), threads):
        merged.extend(part)
    return merged


DECOMPOSITION_TERMS = ("I_minus", "I_plus", "I_delta", "A_R", "gradient_pairing")


def decomposition_integrals(P: GraphProblem, x_prime: Sequence[float]) -> Tuple[Array, Array]:
    """I[u- a-], I[u+ a+], I[delta u K_R], A_R and I[(grad u . w')(a+ - a-)] on shared nodes.

    All heads use the same near model, so the pointwise-odd combination
    I_delta - A_R - 2 I_minus + gradient_pairing cancels to rounding.
    """
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    _check_window_point(P, xp)
    dirs, weights = P.sphere()
    d = P.d

    def f(r: Array) -> Array:
        w = r[:, None, None] * dirs[None, :, :]
        t = _pair_terms(P, xp, w)
        diff = t["a_plus"] - t["a_minus"]
        stack = np.stack(
            [
                t["u_minus"] * t["a_minus"],
                t["u_plus"] * t["a_plus"],
                (t["u_plus"] + t["u_minus"]) * 0.5 * (t["a_plus"] + t["a_minus"]),
                t["remainder"] * diff,
                t["linear"] * diff,
            ]
        ) * t["weight"]
        return r ** (d - 1) * np.sum(stack * weights, axis=-1)

    values, errors = _radial(P, f, 0.5 * P.R, -P.s)
    if 2.0 * P.beta <= P.s:
        raise SlowDecayError(f"beta = {P.beta} <= s/2 = {P.s / 2}: A_R does not converge")
    rho = min(P.inner_radius, 0.25 * P.R)
    errors = errors.copy()
    errors[3] += _remainder_near_bound(P, xp, dirs, rho)
    return values, errors


def check_decomposition(
    P: GraphProblem,
    x_prime: Sequence[float],
    tol: float = 1e-3,
    algebra_tol: float = 1e-6,
    expect_solution: bool = False,
) -> Report:
    """Residuals of the graph equation and of its K_R / A_R rewriting.

    residual_i = I[u- a-] + Psi_R/2 and residual_ii = I[delta u K_R] + Psi_R - A_R
    vanish when the graph solves the equation (``expect_solution``); the
    relation residual_ii - 2 residual_i + gradient_pairing = 0 holds for
    every graph and is always checked.
    """
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    values, errors = decomposition_integrals(P, xp)
    terms = dict(zip(DECOMPOSITION_TERMS, values))
    term_err = dict(zip(DECOMPOSITION_TERMS, errors))
    psi = far_field_psi_estimate(P, P.surface_point(xp))
    graph_side = graph_curvature_estimate(P, xp)
    residual_i = terms["I_minus"] + 0.5 * psi.value
    residual_ii = terms["I_delta"] + psi.value - terms["A_R"]
    algebra = residual_ii - 2.0 * residual_i + terms["gradient_pairing"]
    label = ",".join(format(v, ".6g") for v in xp)
    extra = {f"x{i + 1}": float(v) for i, v in enumerate(xp)}

    report = Report(command="decomposition", metadata={"n": str(P.n), "s": str(P.s), "R": str(P.R)})
    for name in DECOMPOSITION_TERMS:
        report.add(CheckRow.info(f"{name}[{label}]", float(terms[name]), float(term_err[name]), **extra))
    report.add(CheckRow.info(f"psi[{label}]", psi.value, psi.error, **extra))
    report.add(
        CheckRow.bound(
            f"symmetrization[{label}]",
            float(terms["I_plus"] - terms["I_minus"]),
            tol,
            float(term_err["I_plus"] + term_err["I_minus"]),
            **extra,
        )
    )
    report.add(
        CheckRow.bound(
            f"graph_side_consistency[{label}]",
            float(terms["I_minus"] - 0.5 * graph_side.value),
            tol,
            float(term_err["I_minus"] + 0.5 * graph_side.error),
            **extra,
        )
    )
    residual_err_i = float(term_err["I_minus"] + 0.5 * psi.error)
    residual_err_ii = float(term_err["I_delta"] + term_err["A_R"] + psi.error)
    if expect_solution:
        report.add(CheckRow.bound(f"residual_i[{label}]", float(residual_i), tol, residual_err_i, **extra))
        report.add(CheckRow.bound(f"residual_ii[{label}]", float(residual_ii), tol, residual_err_ii, **extra))
    else:
        report.add(CheckRow.info(f"residual_i[{label}]", float(residual_i), residual_err_i, **extra))
        report.add(CheckRow.info(f"residual_ii[{label}]", float(residual_ii), residual_err_ii, **extra))
    report.add(CheckRow.bound(f"algebraic_relation[{label}]", float(algebra), algebra_tol, **extra))
    satisfied = abs(residual_i) <= tol and abs(residual_ii) <= tol
    report.add(CheckRow.info(f"equation_satisfied[{label}]", 1.0 if satisfied else 0.0, **extra))
    return report


@dataclass(frozen=True)
class HolderFit:
    """Least-squares fit log|A(x') - A(y')| ~ slope * log|x' - y'| + log(constant)."""

    slope: float
    constant: float
    separations: Tuple[float, ...]
    differences: Tuple[float, ...]
    threshold: float

    @property
    def passed(self) -> bool:
        return self.slope >= self.threshold

    def to_report(self) -> Report:
        report = Report(command="holder-Ar", metadata={"threshold": format(self.threshold, ".6g")})
        for sep, diff in zip(self.separations, self.differences):
            report.add(CheckRow.info(f"difference[{sep:.6g}]", diff, separation=sep))
        report.add(CheckRow.info("constant", self.constant))
        # passes when threshold - slope <= 0
        report.add(CheckRow.bound("slope_deficit", max(self.threshold - self.slope, 0.0), 0.0, slope=self.slope))
        return report


def dyadic_pairs(
    d: int, base: Optional[Sequence[float]] = None, levels: Sequence[int] = tuple(range(3, 11)), directions: int = 8
) -> List[Tuple[Array, Array]]:
    """Pairs (base, base + 2^{-k} e) over ``directions`` unit vectors e per level."""
    x0 = np.zeros(d) if base is None else np.asarray(base, dtype=float)
    if d == 1:
        units = np.array([[1.0], [-1.0]])
    else:
        ang = np.arange(directions) * (2.0 * math.pi / directions)
        units = np.zeros((directions, d))
        units[:, 0], units[:, 1] = np.cos(ang), np.sin(ang)
    return [(x0, x0 + 2.0 ** (-k) * e) for k in levels for e in units]


def holder_exponent_Ar(
    P: GraphProblem,
    pairs: Optional[Sequence[Tuple[Sequence[float], Sequence[float]]]] = None,
    angular_order: int = 128,
    threads: Optional[int] = None,
) -> HolderFit:
    """Fit the Holder exponent of A_r from differences over the given pairs.

    Differences are averaged over pairs of equal separation before the fit.
    The default sample is the dyadic design around x' = 0.

    Raises:
        DegenerateSampleError: If every difference is below the noise floor.
    """
    sample = list(pairs) if pairs is not None else dyadic_pairs(P.d)
    points: List[Tuple[float, ...]] = []
    for x, y in sample:
        for p in (x, y):
            key = tuple(np.asarray(p, dtype=float).reshape(-1))
            if key not in points:
                points.append(key)
    values = parallel_map(lambda p: remainder_Ar_estimate(P, p, angular_order).value, points, threads)
    lookup = dict(zip(points, values))
    by_sep: dict = {}
    for x, y in sample:
        kx = tuple(np.asarray(x, dtype=float).reshape(-1))
        ky = tuple(np.asarray(y, dtype=float).reshape(-1))
        sep = round(float(np.linalg.norm(np.subtract(kx, ky))), 15)
        by_sep.setdefault(sep, []).append(abs(lookup[kx] - lookup[ky]))
    seps = np.array(sorted(by_sep))
    diffs = np.array([float(np.mean(by_sep[sv])) for sv in seps])
    keep = diffs > NOISE_FLOOR
    if not np.any(keep) or np.sum(keep) < 2:
        raise DegenerateSampleError("Every A_r difference is below the noise floor")
    slope, intercept = np.polyfit(np.log(seps[keep]), np.log(diffs[keep]), 1)
    threshold = 2.0 * min(P.beta, 1.0) - P.s - 0.1
    logger.info(f"A_r Holder fit: slope {slope:.4f} (threshold {threshold:.4f}) over {int(np.sum(keep))} separations")
    return HolderFit(
        slope=float(slope),
        constant=float(math.exp(intercept)),
        separations=tuple(float(v) for v in seps),
        differences=tuple(float(v) for v in diffs),
        threshold=float(threshold),
    )


def gradient_difference_ratio(P: GraphProblem, x_prime: Sequence[float], radii: Sequence[float]) -> float:
    """max over sampled w' of |a(x', w') - a(x', -w')| / |w'|^beta."""
    xp = np.asarray(x_prime, dtype=float).reshape(-1)
    dirs, _ = P.sphere()
    worst = 0.0
    for r in radii:
        w = r * dirs
        diff = np.abs(coefficient_a(P, xp, w) - coefficient_a(P, xp, -w))
        worst = max(worst, float(np.max(diff)) / r**P.beta)
    return worst
