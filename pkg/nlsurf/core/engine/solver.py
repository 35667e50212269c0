"""Collocation solver for the nonlocal Dirichlet problem L_eps u = f_eps in B_{3/4}.

Unknowns are the grid nodes inside the ball; every other node of the box
carries the exterior data and the region outside the box is integrated
directly against the exterior field. Row weights come from three pieces:

* the cube [-h, h]^n around the node, where the second difference is
  replaced by its Hessian model built from discrete second differences;
* the rest of the box, where u is the multilinear interpolant of the
  nodal values (minus the interpolation error of the Hessian model);
* rays leaving the box, integrated against the exterior field.

Off-diagonal weights are non-negative, so the system is monotone.
"""
import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres, onenormest

from nlsurf.core.engine.cubature import (
    fixed_radial_rule,
    gauss_legendre,
    geometric_edges,
    integrate_radial,
    power_law_head,
)
from nlsurf.core.engine.fields import ScalarField, lattice_field
from nlsurf.core.engine.kernels import KernelComponent, KernelSpec, MollifierConfig, mollify_kernel
from nlsurf.core.engine.operators import QuadratureConfig, apply_operator_batch
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import NonlocalError, SolverError
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.solver")

Array = np.ndarray
RightHandSide = Callable[[Array, Array], Array]

DENSE_LIMIT = 10_000
CONDITION_LIMIT = 1e12
OUTER_RADIUS = 1e4
NEAR_CELLS = 4
# A sweep whose epsilons shrink by at least SWEEP_SPAN must cut the distance by SWEEP_DROP.
SWEEP_SPAN = 4.0
SWEEP_DROP = 0.5


def tabulate_kernel(K: KernelSpec, r_min: float = 1e-6, r_max: float = 1e4, count: int = 4000) -> KernelSpec:
    """Replace every radial w-profile by a cubic spline of r^{n+sigma} profile(r) in log r.

    Outside [r_min, r_max] the normalized profile is held constant.

    Raises:
        SolverError: If a component has no radial profile.
    """
    if not K.components or not all(c.radial for c in K.components):
        raise SolverError(f"Kernel '{K.name}' is not a sum of radial components")
    p = K.n + K.sigma
    grid = np.geomspace(r_min, r_max, count)
    logs = np.log(grid)
    comps: List[KernelComponent] = []
    for comp in K.components:
        assert comp.profile is not None
        spline = CubicSpline(logs, comp.profile(grid) * grid**p)

        def prof(r: Array, spline: CubicSpline = spline) -> Array:
            r = np.asarray(r, dtype=float)
            pos = np.where(r > 0, r, np.inf)
            return spline(np.clip(np.log(np.where(r > 0, r, r_min)), logs[0], logs[-1])) * pos ** (-p)

        comps.append(
            KernelComponent(
                w_factor=lambda w, prof=prof: prof(np.linalg.norm(w, axis=-1)),
                x_factor=comp.x_factor,
                profile=prof,
            )
        )
    return KernelSpec(
        n=K.n,
        sigma=K.sigma,
        components=tuple(comps),
        a0=K.a0,
        c0=K.c0,
        C0=K.C0,
        r0=K.r0,
        eta=K.eta,
        Ck=K.Ck,
        lam=K.lam,
        Lam=K.Lam,
        normalization=K.normalization,
        name=f"{K.name}_tab",
    )


@dataclass(frozen=True)
class DirichletProblem:
    """L_eps u = f_eps in B_radius, u = exterior outside, on a grid of spacing h over [-box, box]^n."""

    K_eps: KernelSpec
    f_eps: ScalarField
    exterior: ScalarField
    h: float
    radius: float = 0.75
    box: float = 1.0
    cell_order: int = 6
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        n = self.K_eps.n
        if n not in (1, 2):
            raise NonlocalError(f"The Dirichlet solver supports n in (1, 2), got {n}")
        if self.f_eps.dim != n or self.exterior.dim != n:
            raise NonlocalError("Right side and exterior data must live on R^n")
        if not math.isfinite(self.exterior.sup_bound):
            raise NonlocalError(f"Exterior data '{self.exterior.name}' has no finite sup bound")
        cells = 2.0 * self.box / self.h
        if abs(cells - round(cells)) > 1e-9:
            raise NonlocalError(f"h = {self.h} does not divide the box [-{self.box}, {self.box}]")
        if self.h > self.radius / 4.0 or self.radius >= self.box:
            raise NonlocalError(f"Grid h = {self.h} does not resolve B_{self.radius} inside the box")
        if not float(self.K_eps(np.zeros(n), np.full(n, self.h))) > 0:
            raise NonlocalError(f"Kernel '{self.K_eps.name}' is not positive")

    @property
    def n(self) -> int:
        return self.K_eps.n

    @property
    def cells(self) -> int:
        return int(round(2.0 * self.box / self.h))

    def axes(self) -> List[Array]:
        return [-self.box + self.h * np.arange(self.cells + 1)] * self.n

    def nodes(self) -> Array:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1).reshape(-1, self.n)

    def unknown_mask(self) -> Array:
        return np.linalg.norm(self.nodes(), axis=1) < self.radius - 1e-12


@dataclass
class SolveDiagnostics:
    """Residual, dominance margin, condition estimate and monotonicity of one solve."""

    residual: float
    dominance_margin: float
    condition_estimate: float
    monotone: bool
    unknowns: int
    method: str

    def to_rows(self, prefix: str = "") -> List[CheckRow]:
        return [
            CheckRow.bound(f"{prefix}residual", self.residual, 1e-8),
            CheckRow.info(f"{prefix}dominance_margin", self.dominance_margin),
            CheckRow.bound(f"{prefix}condition_estimate", self.condition_estimate, CONDITION_LIMIT)
            if math.isfinite(self.condition_estimate)
            else CheckRow.info(f"{prefix}condition_estimate", self.condition_estimate),
            CheckRow.bound(f"{prefix}monotone_violation", 0.0 if self.monotone else 1.0, 0.0),
            CheckRow.info(f"{prefix}unknowns", float(self.unknowns)),
        ]


@dataclass
class SolveResult:
    """Nodal solution on the box grid with the lattice-backed field."""

    problem: DirichletProblem
    values: Array
    unknown: Array
    diagnostics: SolveDiagnostics
    field: ScalarField

    def nodes(self) -> Array:
        return self.problem.nodes()

    def interior_values(self) -> Array:
        return self.values[self.unknown]


@dataclass
class _ComponentTables:
    x_factor: Optional[Callable[[Array], Array]]
    far: Array
    interp_error: Array
    near: float


def _cell_rule(n: int, order: int, pieces: int) -> Tuple[Array, Array]:
    x, w = gauss_legendre(order)
    if pieces > 1:
        x = ((np.arange(pieces)[:, None] + x[None, :]) / pieces).ravel()
        w = np.tile(w, pieces) / pieces
    t = np.stack(np.meshgrid(*([x] * n), indexing="ij"), axis=-1).reshape(-1, n)
    wt = np.ones(1)
    for _ in range(n):
        wt = np.multiply.outer(wt, w).reshape(-1)
    return t, wt


def _cell_moments(
    profile: Callable[[Array], Array], cells: Array, h: float, t: Array, wt: Array
) -> Tuple[Array, Array]:
    """Hat-function moments and Hessian-model interpolation errors of one kernel profile per cell."""
    n = cells.shape[1]
    w = h * (cells[:, None, :] + t[None, :, :])
    kv = profile(np.linalg.norm(w, axis=-1)) * wt[None, :] * h**n
    patterns = list(itertools.product((0, 1), repeat=n))
    hats = np.stack([np.prod(np.where(np.array(s)[None, :] == 1, t, 1.0 - t), axis=1) for s in patterns], axis=1)
    errors = 0.5 * h * h * t * (1.0 - t)
    return kv @ hats, kv @ errors


def _radial_moment(profile: Callable[[Array], Array], t_values: Array, k: int, p: float) -> Array:
    """Integral over [0, t] of profile(r) r^k for each t, with a power-law head at 0."""
    t = np.asarray(t_values, dtype=float)

    def f(tau: Array) -> Array:
        r = t[:, None] * tau[None, :]
        return profile(r) * r**k * t[:, None]

    rho = 1e-8
    head = power_law_head(f(np.array([rho]))[:, 0], rho, k - p)
    res = integrate_radial(f, geometric_edges(rho, 1.0), 8, 1e-13, 8, raise_on_failure=False)
    return head + np.asarray(res.value)


def _near_moment(profile: Callable[[Array], Array], n: int, h: float, p: float) -> float:
    """Integral over [-h, h]^n of profile(|w|) w_1^2."""
    if n == 1:
        return float(2.0 * _radial_moment(profile, np.array([h]), 2, p)[0])
    g, gw = gauss_legendre(16)
    theta = 0.25 * math.pi * g
    moments = _radial_moment(profile, h / np.cos(theta), 3, p)
    return float(4.0 * np.sum(0.25 * math.pi * gw * moments))


def _component_tables(P: DirichletProblem) -> List[_ComponentTables]:
    n, N, h = P.n, P.cells, P.h
    p = n + P.K_eps.sigma
    span = np.arange(-N - 1, N + 1)
    cells = np.stack(np.meshgrid(*([span] * n), indexing="ij"), axis=-1).reshape(-1, n)
    near = np.max(np.maximum(np.abs(cells), np.abs(cells + 1)), axis=1) <= NEAR_CELLS
    inner = np.all((cells == -1) | (cells == 0), axis=1)
    coarse_rule = _cell_rule(n, P.cell_order, 1)
    fine_rule = _cell_rule(n, P.cell_order, 4)
    patterns = list(itertools.product((0, 1), repeat=n))
    shape = (2 * N + 2,) * n
    tables = []
    for comp in P.K_eps.components:
        assert comp.profile is not None
        mom, err = _cell_moments(comp.profile, cells, h, *coarse_rule)
        mom[near], err[near] = _cell_moments(comp.profile, cells[near], h, *fine_rule)
        mom[inner], err[inner] = 0.0, 0.0
        mom = mom.reshape(shape + (len(patterns),))
        err = err.reshape(shape + (n,))
        far = np.zeros((2 * N + 1,) * n)
        for si, s in enumerate(patterns):
            far += 2.0 * mom[tuple(slice(1 - sa, 2 * N + 2 - sa) for sa in s) + (si,)]
        tables.append(
            _ComponentTables(
                x_factor=comp.x_factor,
                far=far,
                interp_error=2.0 * err,
                near=_near_moment(comp.profile, n, h, p),
            )
        )
    return tables


def _exterior_rays(x: Array, box: float, arc_order: int = 24) -> Tuple[Array, Array, Array]:
    """Directions, angular weights and box-exit distances of rays from x."""
    n = x.size
    if n == 1:
        dirs, wts = np.array([[1.0], [-1.0]]), np.ones(2)
    else:
        corners = np.array([[box, box], [-box, box], [-box, -box], [box, -box]])
        ang = np.sort(np.mod(np.arctan2(corners[:, 1] - x[1], corners[:, 0] - x[0]), 2.0 * math.pi))
        edges = np.append(ang, ang[0] + 2.0 * math.pi)
        g, gw = gauss_legendre(arc_order)
        a, b = edges[:-1], edges[1:]
        theta = (a[:, None] + (b - a)[:, None] * g[None, :]).ravel()
        wts = ((b - a)[:, None] * gw[None, :]).ravel()
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    safe = np.where(dirs == 0, 1.0, dirs)
    bounds = np.where(dirs > 0, (box - x) / safe, np.where(dirs < 0, (-box - x) / safe, np.inf))
    return dirs, wts, np.min(bounds, axis=1)


def _exterior_terms(P: DirichletProblem, x: Array) -> Tuple[float, float]:
    """Kernel mass and exterior-data integral over the rays leaving the box from x."""
    n, K = P.n, P.K_eps
    dirs, wts, t_exit = _exterior_rays(x, P.box)
    tau_max = OUTER_RADIUS / float(np.min(t_exit))
    tau, tau_w = fixed_radial_rule(geometric_edges(1.0, tau_max), 8)
    t = t_exit[:, None] * tau[None, :]
    w = t[..., None] * dirs[:, None, :]
    kv = K(x, w) * t ** (n - 1) * t_exit[:, None] * tau_w[None, :]
    g = P.exterior(x + w)
    far = t_exit * tau_max
    tail = K(x, far[:, None] * dirs) * far**n / K.sigma
    mass = float(wts @ (np.sum(kv, axis=1) + tail))
    # the tail beyond the outer radius carries the data value at its start
    data = float(wts @ (np.sum(kv * g, axis=1) + tail * P.exterior(x + far[:, None] * dirs)))
    return mass, data


def _assemble_row(
    P: DirichletProblem, tables: List[_ComponentTables], k: Tuple[int, ...]
) -> Tuple[Array, float, float]:
    """Weights of node k against every grid node (diagonal included) plus exterior mass and data."""
    n, N, h = P.n, P.cells, P.h
    x = -P.box + h * np.asarray(k, dtype=float)
    row = np.zeros((N + 1,) * n)
    far_slice = tuple(slice(N - ka, 2 * N + 1 - ka) for ka in k)
    err_slice = tuple(slice(N + 1 - ka, 2 * N + 1 - ka) for ka in k)
    neighbor = np.zeros(n)
    for tab in tables:
        factor = 1.0 if tab.x_factor is None else float(tab.x_factor(x))
        row += factor * tab.far[far_slice]
        corrections = np.array([np.sum(tab.interp_error[err_slice + (a,)]) for a in range(n)])
        neighbor += factor * (tab.near - corrections) / h**2
    for a in range(n):
        for step in (-1, 1):
            idx = list(k)
            idx[a] += step
            row[tuple(idx)] += neighbor[a]
    mass, data = _exterior_terms(P, x)
    row[tuple(k)] = -(float(np.sum(row)) - row[tuple(k)]) - 2.0 * mass
    return row.reshape(-1), mass, data


def _solve_dense(A: Array, b: Array) -> Tuple[Array, float]:
    lu, piv = lu_factor(A, check_finite=True)
    if np.any(np.diag(lu) == 0.0):
        raise SolverError("Discrete system is singular", condition_estimate=math.inf)
    m = A.shape[0]
    inverse = LinearOperator(
        (m, m),
        matvec=lambda v: lu_solve((lu, piv), v),
        rmatvec=lambda v: lu_solve((lu, piv), v, trans=1),
        dtype=float,
    )
    cond = float(np.linalg.norm(A, 1)) * float(onenormest(inverse)) if m > 1 else 1.0
    if cond > CONDITION_LIMIT:
        raise SolverError(f"Discrete system is ill-conditioned (estimate {cond:.3e})", condition_estimate=cond)
    return lu_solve((lu, piv), b), cond


def _solve_iterative(A: Array, b: Array) -> Tuple[Array, float]:
    diag = np.diag(A).copy()
    precond = LinearOperator(A.shape, matvec=lambda v: v / diag, dtype=float)
    u, info = gmres(A, b, rtol=1e-10, atol=0.0, restart=200, maxiter=50, M=precond)
    if info != 0:
        raise SolverError(f"GMRES did not reach relative residual 1e-10 (info={info})")
    return u, math.nan


def solve_dirichlet(P: DirichletProblem) -> SolveResult:
    """Assemble the collocation system, solve it and wrap the nodal solution as a field.

    Raises:
        SolverError: If the system is singular or ill-conditioned.
    """
    nodes = P.nodes()
    unknown = P.unknown_mask()
    shape = (P.cells + 1,) * P.n
    indices = [tuple(int(v) for v in np.unravel_index(i, shape)) for i in np.nonzero(unknown)[0]]
    logger.info(f"Assembling {len(indices)} rows on a {'x'.join(map(str, shape))} grid (h={P.h:g})")
    tables = _component_tables(P)
    rows = parallel_map(lambda k: _assemble_row(P, tables, k), indices, P.threads)
    W = np.stack([r[0] for r in rows])
    data_int = np.array([r[2] for r in rows])
    data_idx = np.nonzero(~unknown)[0]
    unk_idx = np.nonzero(unknown)[0]
    g = P.exterior(nodes[data_idx])
    A = W[:, unk_idx]
    b = P.f_eps(nodes[unk_idx]) - 2.0 * data_int - W[:, data_idx] @ g

    method = "dense_lu" if A.shape[0] <= DENSE_LIMIT else "gmres"
    u, cond = _solve_dense(A, b) if method == "dense_lu" else _solve_iterative(A, b)
    residual = float(np.max(np.abs(A @ u - b))) / max(float(np.max(np.abs(b))), 1.0)
    diag = np.abs(np.diag(A))
    off = np.sum(np.abs(A), axis=1) - diag
    margin = float(np.min(diag - off) / np.max(diag))
    off_all = W.copy()
    off_all[np.arange(W.shape[0]), unk_idx] = 0.0
    monotone = bool(np.all(off_all >= -1e-14 * np.max(diag)) and np.all(np.diag(A) < 0))
    if not monotone:
        logger.warning("Assembled system is not monotone: negative off-diagonal weights")
    diagnostics = SolveDiagnostics(
        residual=residual,
        dominance_margin=margin,
        condition_estimate=cond,
        monotone=monotone,
        unknowns=int(unk_idx.size),
        method=method,
    )
    values = np.empty(nodes.shape[0])
    values[data_idx] = g
    values[unk_idx] = u
    grid = values.reshape(shape)
    box = P.box
    sol = lattice_field(
        P.axes(),
        grid,
        inside=lambda y: np.all(np.abs(y) <= box, axis=-1),
        exterior=P.exterior,
    )
    logger.info(f"Solved with {method}: residual {residual:.2e}, condition {cond:.2e}")
    return SolveResult(problem=P, values=values, unknown=unknown, diagnostics=diagnostics, field=sol)


def mollify_rhs(f: RightHandSide, u: ScalarField, eps: float, order: int = 8) -> ScalarField:
    """x -> f(x, u(x)) convolved with the unit-mass mollifier at scale eps."""
    offsets, weights = MollifierConfig(epsilon=eps, conv_order=order).rhs_rule(u.dim)

    def value(x: Array) -> Array:
        y = x[..., None, :] - offsets
        return np.tensordot(np.asarray(f(y, u(y)), dtype=float), weights, axes=([-1], [0]))

    return ScalarField(dim=u.dim, func=value, name="mollified_rhs", params={"epsilon": eps})


def operator_rhs(
    K: KernelSpec, u: ScalarField, cfg: Optional[QuadratureConfig] = None, threads: Optional[int] = None
) -> ScalarField:
    """Field x -> integral of K(x, w) times the second difference of u, for manufactured problems."""

    def value(x: Array) -> Array:
        flat = x.reshape(-1, u.dim)
        vals = np.array([r.value for r in apply_operator_batch(K, u, flat, cfg, threads)])
        return vals.reshape(x.shape[:-1])

    return ScalarField(dim=u.dim, func=value, name="operator_rhs")


def max_principle_violation(result: SolveResult, reach: float = 4.0) -> float:
    """Largest excursion of interior values outside the range of the exterior data.

    The range covers the data nodes and the exterior field sampled at the
    grid spacing on [-reach * box, reach * box]^n.
    """
    P = result.problem
    ticks = np.arange(-reach * P.box, reach * P.box + 0.5 * P.h, P.h)
    far = np.stack(np.meshgrid(*([ticks] * P.n), indexing="ij"), axis=-1).reshape(-1, P.n)
    far = far[np.linalg.norm(far, axis=1) >= P.radius]
    data = np.concatenate([result.values[~result.unknown], P.exterior(far)])
    inner = result.interior_values()
    lo, hi = float(np.min(data)), float(np.max(data))
    return float(max(0.0, lo - float(np.min(inner)), float(np.max(inner)) - hi))


def interior_distance(result: SolveResult, u: ScalarField) -> float:
    """max over unknown nodes of |u_h - u|."""
    pts = result.nodes()[result.unknown]
    return float(np.max(np.abs(result.interior_values() - u(pts))))


def save_lattice_field(result: SolveResult, stem: Path) -> Dict[str, Path]:
    """Write ``<stem>.csv`` (one row per node) and ``<stem>.json`` (grid header)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    P = result.problem
    shape = (P.cells + 1,) * P.n
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([f"i{a + 1}" for a in range(P.n)] + ["value", "unknown"])
        for flat, idx in enumerate(np.ndindex(*shape)):
            writer.writerow([*idx, repr(float(result.values[flat])), int(result.unknown[flat])])
    header = {
        "dim": P.n,
        "lower": [-P.box] * P.n,
        "upper": [P.box] * P.n,
        "h": P.h,
        "shape": list(shape),
        "radius": P.radius,
        "kernel": P.K_eps.name,
        "exterior": P.exterior.name,
    }
    with open(json_path, "w") as handle:
        json.dump(header, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return {"csv": csv_path, "json": json_path}


@dataclass(frozen=True)
class ApproximationBase:
    """Unmollified data of the epsilon study: kernel, f(x, u), the reference u and the grid."""

    K: KernelSpec
    f: RightHandSide
    u: ScalarField
    h: float
    radius: float = 0.75
    box: float = 1.0
    cell_order: int = 6
    threads: Optional[int] = None
    conv_order: int = 8
    metadata: Dict[str, str] = field(default_factory=dict)


def approximation_study(base: ApproximationBase, eps_list: Sequence[float]) -> Report:
    """Solve with K_eps and f_eps for each eps and report max |u_eps - u| over interior nodes.

    Passes when the last distance is below the first one (or all vanish). When the
    epsilons shrink by SWEEP_SPAN or more, the last distance must also be at most
    SWEEP_DROP times the first.
    """
    report = Report(command="approx-study", metadata={**base.metadata, "h": str(base.h)})
    distances: List[float] = []
    sup_u = base.u.sup_bound
    for eps in eps_list:
        K_eps = tabulate_kernel(mollify_kernel(base.K, MollifierConfig(epsilon=eps, conv_order=base.conv_order)))
        P = DirichletProblem(
            K_eps=K_eps,
            f_eps=mollify_rhs(base.f, base.u, eps),
            exterior=base.u,
            h=base.h,
            radius=base.radius,
            box=base.box,
            cell_order=base.cell_order,
            threads=base.threads,
        )
        result = solve_dirichlet(P)
        dist = interior_distance(result, base.u)
        distances.append(dist)
        sup_eps = max(float(np.max(np.abs(result.values))), sup_u)
        report.add(CheckRow.info(f"distance[{eps:g}]", dist, epsilon=eps))
        report.add(CheckRow.info(f"boundedness[{eps:g}]", sup_eps / (1.0 + sup_u), epsilon=eps))
        report.extend(Report(command="approx-study", rows=result.diagnostics.to_rows(f"solve[{eps:g}]:")))
        logger.info(f"epsilon={eps:g}: max |u_eps - u| = {dist:.3e}")
    first, last = distances[0], distances[-1]
    if first <= 1e-12:
        report.add(CheckRow.bound("final_over_first", last, 1e-8))
    else:
        report.add(CheckRow.bound("final_over_first", last / first, 1.0 - 1e-12))
        if eps_list[0] >= (1.0 - 1e-9) * SWEEP_SPAN * eps_list[-1]:
            report.add(CheckRow.bound(f"drop[{eps_list[0]:g}->{eps_list[-1]:g}]", last / first, SWEEP_DROP))
    return report
