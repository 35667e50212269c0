"""Lattice sets, fractional perimeter and nonlocal mean curvature.

A :class:`LatticeSet` stores a cell indicator on an axis-aligned box and an
:class:`ExteriorRule` that decides membership outside the box. Curvature
integrals work from a level function (negative inside the set) rather than
from the cells, so the boundary is resolved exactly by bisection along
spherical arcs.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special
from scipy.signal import fftconvolve

from nlsurf.core.engine.cubature import (
    gauss_legendre,
    geometric_edges,
    integrate_radial,
    power_law_head,
    power_law_head_error,
    sphere_area,
    tensor_gauss,
)
from nlsurf.core.engine.fields import GraphWindow, ScalarField, make_field
from nlsurf.core.errors import (
    BoundaryResolutionError,
    ContainmentError,
    GeometryError,
    OverlapError,
    TailBoundError,
)
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.geometry")

Array = np.ndarray
LevelFunc = Callable[[Array], Array]
RuleKind = Literal["subgraph", "halfspace", "empty", "full"]


class GeometryConfig(BaseModel):
    """Resolution controls for curvature and perimeter integrals."""

    model_config = ConfigDict(frozen=True)

    angular_cells: int = Field(default=256, ge=8)
    polar_cells: int = Field(default=63, ge=3)
    azimuth_cells: int = Field(default=64, ge=4)
    inner_radius: float = Field(default=1e-4, gt=0.0)
    tol: float = Field(default=1e-7, gt=0.0)
    radial_order: int = Field(default=8, ge=2)
    max_refinements: int = Field(default=40, ge=0)
    bisection_steps: int = Field(default=52, ge=8)
    piece_order: int = Field(default=4, ge=1)
    boundary_tol: float = Field(default=1e-8, gt=0.0)
    pair_order: int = Field(default=10, ge=2)
    exact_pair_range: int = Field(default=32, ge=2)
    ray_order: int = Field(default=16, ge=2)
    cell_order: int = Field(default=2, ge=1)
    ray_samples: int = Field(default=48, ge=4)
    threads: Optional[int] = None

    @model_validator(mode="after")
    def _odd_polar_cells(self) -> "GeometryConfig":
        if self.polar_cells % 2 == 0:
            raise ValueError("polar_cells must be odd so the equator is never a cell edge")
        return self


@dataclass(frozen=True)
class IntegralEstimate:
    """A singular integral with its error estimate."""

    value: float
    error: float


# --------------------------------------------------------------------------
# Exterior rules and lattice sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExteriorRule:
    """Membership of points outside the lattice box.

    ``subgraph`` means {y_n < u(y')} (or its complement when ``flipped``),
    ``halfspace`` means {y . normal < offset}.
    """

    kind: RuleKind
    graph: Optional[ScalarField] = None
    normal: Optional[Tuple[float, ...]] = None
    offset: float = 0.0
    flipped: bool = False

    @classmethod
    def subgraph(cls, u: ScalarField) -> "ExteriorRule":
        return cls(kind="subgraph", graph=u)

    @classmethod
    def halfspace(cls, normal: Sequence[float], offset: float = 0.0) -> "ExteriorRule":
        nu = np.asarray(normal, dtype=float)
        norm = float(np.linalg.norm(nu))
        if norm == 0.0:
            raise GeometryError("Half-space normal must be non-zero")
        return cls(kind="halfspace", normal=tuple(nu / norm), offset=offset / norm)

    @classmethod
    def empty(cls) -> "ExteriorRule":
        return cls(kind="empty")

    @classmethod
    def full(cls) -> "ExteriorRule":
        return cls(kind="full")

    @property
    def has_level(self) -> bool:
        return self.kind in ("subgraph", "halfspace")

    def level(self, y: Array) -> Array:
        """Signed function, negative exactly where the rule assigns membership."""
        y = np.asarray(y, dtype=float)
        if self.kind == "empty":
            return np.ones(y.shape[:-1])
        if self.kind == "full":
            return -np.ones(y.shape[:-1])
        if self.kind == "halfspace":
            return y @ np.asarray(self.normal) - self.offset
        assert self.graph is not None
        raw = y[..., -1] - self.graph(y[..., :-1])
        return -raw if self.flipped else raw

    def contains(self, y: Array) -> Array:
        return self.level(y) < 0

    def complement(self) -> "ExteriorRule":
        if self.kind == "empty":
            return ExteriorRule.full()
        if self.kind == "full":
            return ExteriorRule.empty()
        if self.kind == "halfspace":
            return replace(self, normal=tuple(-np.asarray(self.normal)), offset=-self.offset)
        return replace(self, flipped=not self.flipped)

    def translate(self, shift: Array) -> "ExteriorRule":
        shift = np.asarray(shift, dtype=float)
        if self.kind == "halfspace":
            return replace(self, offset=self.offset + float(shift @ np.asarray(self.normal)))
        if self.kind == "subgraph":
            u = self.graph
            assert u is not None
            moved = ScalarField(
                dim=u.dim,
                func=lambda y: u(y - shift[:-1]) + shift[-1],
                sup_bound=u.sup_bound + abs(float(shift[-1])),
                name=u.name,
                params=dict(u.params),
            )
            return replace(self, graph=moved)
        return self

    def to_header(self) -> Dict[str, object]:
        header: Dict[str, object] = {"kind": self.kind}
        if self.kind == "halfspace":
            header.update(normal=list(self.normal or ()), offset=self.offset)
        if self.kind == "subgraph":
            assert self.graph is not None
            header.update(field=self.graph.name, params=dict(self.graph.params), flipped=self.flipped)
        return header

    @classmethod
    def from_header(cls, header: Dict[str, object], dim: int) -> "ExteriorRule":
        kind = header.get("kind")
        if kind == "empty":
            return cls.empty()
        if kind == "full":
            return cls.full()
        if kind == "halfspace":
            return cls.halfspace(header["normal"], float(header.get("offset", 0.0)))  # type: ignore[arg-type]
        if kind == "subgraph":
            u = make_field(str(header["field"]), dim - 1, **dict(header.get("params", {})))  # type: ignore[arg-type]
            return replace(cls.subgraph(u), flipped=bool(header.get("flipped", False)))
        raise GeometryError(f"Unknown exterior rule '{kind}'")


@dataclass(frozen=True, eq=False)
class LatticeSet:
    """Cell indicator on [lower, upper] with spacing h plus an exterior rule.

    ``level_set``, when given, describes the same set exactly and is used by
    the curvature integrals inside the box.
    """

    dim: int
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    h: float
    indicator: Array
    exterior: ExteriorRule
    level_set: Optional[LevelFunc] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise GeometryError(f"Lattice sets support n <= 3, got {self.dim}")
        if self.indicator.shape != self.shape:
            raise GeometryError(f"Indicator shape {self.indicator.shape} does not match box {self.shape}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(int(round((b - a) / self.h)) for a, b in zip(self.lower, self.upper))

    def axes(self) -> List[Array]:
        """Cell-center coordinates per axis."""
        return [a + self.h * (np.arange(k) + 0.5) for a, k in zip(self.lower, self.shape)]

    def centers(self) -> Array:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def in_box(self, y: Array) -> Array:
        y = np.asarray(y, dtype=float)
        return np.all((y >= np.asarray(self.lower)) & (y < np.asarray(self.upper)), axis=-1)

    def contains(self, y: Array) -> Array:
        """Membership from the cells inside the box and the exterior rule outside."""
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, self.dim)
        out = self.exterior.contains(flat)
        box = self.in_box(flat)
        if np.any(box):
            idx = np.floor((flat[box] - np.asarray(self.lower)) / self.h).astype(int)
            idx = np.minimum(idx, np.asarray(self.shape) - 1)
            out[box] = self.indicator[tuple(idx.T)]
        return out.reshape(y.shape[:-1])

    @property
    def resolvable(self) -> bool:
        return self.level_set is not None or self.exterior.has_level

    def level(self, y: Array) -> Array:
        """Level function: ``level_set`` inside the box, the exterior rule outside.

        Raises:
            BoundaryResolutionError: If no level description is available.
        """
        if self.level_set is None:
            if not self.exterior.has_level:
                raise BoundaryResolutionError("Lattice set carries no level description of its boundary")
            return self.exterior.level(y)
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, self.dim)
        out = self.exterior.level(flat)
        box = self.in_box(flat)
        if np.any(box):
            out[box] = self.level_set(flat[box])
        return out.reshape(y.shape[:-1])

    def complement(self) -> "LatticeSet":
        level = self.level_set
        return replace(
            self,
            indicator=~self.indicator,
            exterior=self.exterior.complement(),
            level_set=(lambda y: -level(y)) if level is not None else None,
        )

    def translate(self, cells: Sequence[int]) -> "LatticeSet":
        """Shift the box, the level function and the exterior rule by whole cells."""
        shift = self.h * np.asarray(cells, dtype=float)
        level = self.level_set
        return replace(
            self,
            lower=tuple(np.asarray(self.lower) + shift),
            upper=tuple(np.asarray(self.upper) + shift),
            exterior=self.exterior.translate(shift),
            level_set=(lambda y: level(np.asarray(y) - shift)) if level is not None else None,
        )

    def validate(self) -> None:
        """Check the subgraph rule against the cell centers.

        Raises:
            GeometryError: If the indicator disagrees with {x_n < u(x')}.
        """
        if self.exterior.kind != "subgraph":
            return
        expected = self.exterior.contains(self.centers())
        bad = int(np.sum(expected != self.indicator))
        if bad:
            raise GeometryError(f"{bad} cells disagree with the subgraph exterior rule")


def _box(lower: Sequence[float], upper: Sequence[float]) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    lo, hi = tuple(float(v) for v in lower), tuple(float(v) for v in upper)
    if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
        raise GeometryError(f"Invalid box {lo} - {hi}")
    return lo, hi


def lattice_from_level(
    level: LevelFunc,
    lower: Sequence[float],
    upper: Sequence[float],
    h: float,
    exterior: ExteriorRule,
) -> LatticeSet:
    """Lattice set whose cells are the centers with level < 0."""
    lo, hi = _box(lower, upper)
    for a, b in zip(lo, hi):
        if abs((b - a) / h - round((b - a) / h)) > 1e-9:
            raise GeometryError(f"Box side {b - a} is not a multiple of h={h}")
    probe = LatticeSet(
        dim=len(lo),
        lower=lo,
        upper=hi,
        h=h,
        indicator=np.zeros(tuple(int(round((b - a) / h)) for a, b in zip(lo, hi)), dtype=bool),
        exterior=exterior,
        level_set=level,
    )
    return replace(probe, indicator=np.asarray(level(probe.centers()) < 0))


def subgraph_set(
    u: ScalarField, lower: Sequence[float], upper: Sequence[float], h: float
) -> LatticeSet:
    """{x_n < u(x')} with the subgraph rule outside the box."""
    rule = ExteriorRule.subgraph(u)
    return lattice_from_level(rule.level, lower, upper, h, rule)


def halfspace_set(
    lower: Sequence[float],
    upper: Sequence[float],
    h: float,
    normal: Optional[Sequence[float]] = None,
    offset: float = 0.0,
) -> LatticeSet:
    """{x . normal < offset}; the default normal is e_n."""
    n = len(lower)
    rule = ExteriorRule.halfspace(normal if normal is not None else [0.0] * (n - 1) + [1.0], offset)
    return lattice_from_level(rule.level, lower, upper, h, rule)


def ball_set(
    radius: float,
    lower: Sequence[float],
    upper: Sequence[float],
    h: float,
    center: Optional[Sequence[float]] = None,
) -> LatticeSet:
    """Ball inside the box, empty outside.

    Raises:
        GeometryError: If the ball leaves the box.
    """
    c = np.zeros(len(lower)) if center is None else np.asarray(center, dtype=float)
    if np.any(c - radius < np.asarray(lower)) or np.any(c + radius > np.asarray(upper)):
        raise GeometryError("Ball does not fit inside the lattice box")
    return lattice_from_level(
        lambda y: np.linalg.norm(np.asarray(y) - c, axis=-1) - radius, lower, upper, h, ExteriorRule.empty()
    )


def box_set(
    corner_lo: Sequence[float],
    corner_hi: Sequence[float],
    lower: Sequence[float],
    upper: Sequence[float],
    h: float,
) -> LatticeSet:
    """Axis-aligned box [corner_lo, corner_hi], empty outside the lattice box."""
    a = np.asarray(corner_lo, dtype=float)
    b = np.asarray(corner_hi, dtype=float)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return lattice_from_level(
        lambda y: np.max(np.abs(np.asarray(y) - mid) / half, axis=-1) - 1.0,
        lower,
        upper,
        h,
        ExteriorRule.empty(),
    )


def save_lattice(E: LatticeSet, stem: Path) -> Dict[str, Path]:
    """Write ``<stem>.csv`` (one row per cell) and ``<stem>.json`` (header)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([f"i{a + 1}" for a in range(E.dim)] + ["inside"])
        for idx in np.ndindex(*E.shape):
            writer.writerow([*idx, int(E.indicator[idx])])
    header = {
        "dim": E.dim,
        "lower": list(E.lower),
        "upper": list(E.upper),
        "h": E.h,
        "shape": list(E.shape),
        "exterior_rule": E.exterior.to_header(),
    }
    with open(json_path, "w") as handle:
        json.dump(header, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return {"csv": csv_path, "json": json_path}


def load_lattice(stem: Path) -> LatticeSet:
    """Read a lattice written by :func:`save_lattice`.

    Raises:
        GeometryError: If the files are inconsistent.
    """
    stem = Path(stem)
    try:
        with open(stem.with_suffix(".json")) as handle:
            header = json.load(handle)
        shape = tuple(int(k) for k in header["shape"])
        indicator = np.zeros(shape, dtype=bool)
        with open(stem.with_suffix(".csv"), newline="") as handle:
            reader = csv.reader(handle)
            next(reader)
            for row in reader:
                indicator[tuple(int(v) for v in row[:-1])] = row[-1] == "1"
    except (OSError, KeyError, ValueError, IndexError) as e:
        raise GeometryError(f"Could not load lattice '{stem}': {str(e)}")
    dim = int(header["dim"])
    E = LatticeSet(
        dim=dim,
        lower=tuple(header["lower"]),
        upper=tuple(header["upper"]),
        h=float(header["h"]),
        indicator=indicator,
        exterior=ExteriorRule.from_header(header["exterior_rule"], dim),
    )
    E.validate()
    return E


# --------------------------------------------------------------------------
# Closed forms
# --------------------------------------------------------------------------


def interval_interaction(a: float, b: float, c: float, d: float, s: float) -> float:
    """Exact L([a,b], [c,d]) for b <= c in one dimension."""
    if b > c:
        raise OverlapError("Intervals overlap")

    def g(t: float) -> float:
        return t ** (1.0 - s) if t > 0 else 0.0

    return (g(c - a) - g(c - b) - g(d - a) + g(d - b)) / (s * (1.0 - s))


def ball_curvature(radius: float, n: int, s: float) -> float:
    """Nonlocal mean curvature of a ball (positive, convex convention)."""
    if n == 1:
        return 2.0 * (2.0 * radius) ** (-s) / s
    hemisphere = sphere_area(n - 1) * 0.5 * special.beta(0.5 * (1.0 - s), 0.5 * (n - 1))
    return (2.0 / s) * (2.0 * radius) ** (-s) * hemisphere


# --------------------------------------------------------------------------
# Cell-pair weights and interaction energies
# --------------------------------------------------------------------------


def _pair_weights_1d(offsets: Array, s: float) -> Array:
    o = np.abs(offsets).astype(float)
    g = lambda t: np.where(t > 0, np.abs(t) ** (1.0 - s), 0.0)  # noqa: E731
    return (2.0 * g(o) - g(o - 1.0) - g(o + 1.0)) / (s * (1.0 - s))


def _corner_polar(o: Tuple[int, int], quadrant: Tuple[int, int], s: float, order: int) -> float:
    """Quadrant integral whose singular point sits at a quadrant corner."""
    alpha, beta = [], []
    for oi, qi in zip(o, quadrant):
        tau = -1.0 if qi == -1 else 1.0
        sigma = 1.0 if qi + oi == 0 else -1.0
        alpha.append(1.0 + tau * oi)
        beta.append(-tau * sigma)
    if abs(alpha[0] * alpha[1]) > 1e-12:
        raise GeometryError("Touching-cell weight does not vanish at the contact point")
    x, w = gauss_legendre(order)
    total = 0.0
    for lo, hi in ((0.0, 0.25 * math.pi), (0.25 * math.pi, 0.5 * math.pi)):
        psi = lo + (hi - lo) * x
        c, sn = np.cos(psi), np.sin(psi)
        reach = 1.0 / np.maximum(c, sn)
        a1 = alpha[0] * beta[1] * sn + alpha[1] * beta[0] * c
        a2 = beta[0] * beta[1] * c * sn
        radial = a1 * reach ** (1.0 - s) / (1.0 - s) + a2 * reach ** (2.0 - s) / (2.0 - s)
        total += float(np.sum(radial * w)) * (hi - lo)
    return total


def _quadrant_rule(order: int) -> List[Tuple[Tuple[int, int], Array, Array]]:
    rules = []
    for q1 in (-1, 0):
        for q2 in (-1, 0):
            pts, wts = tensor_gauss([q1, q2], [q1 + 1, q2 + 1], order)
            rules.append(((q1, q2), pts, wts))
    return rules


@lru_cache(maxsize=16)
def _pair_table_2d(s: float, size: int, order: int, exact_range: int) -> Array:
    """w(o) for o in [0, size)^2, the cell-pair integral in units of h^{2-s}."""
    p = 2.0 + s
    o1, o2 = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dist = np.hypot(o1, o2).astype(float)
    safe = np.where(dist > 0, dist, 1.0)
    table = safe ** (-p) * (1.0 + p * p / (12.0 * safe**2))
    near = np.argwhere((np.maximum(o1, o2) <= exact_range) & (dist > 0))
    quads = _quadrant_rule(order)
    values = np.zeros(len(near))
    for _, pts, wts in quads:
        z = near[:, None, :] + pts[None, :, :]
        g = np.prod(1.0 - np.abs(pts), axis=-1)
        values += np.sum(np.linalg.norm(z, axis=-1) ** (-p) * g * wts, axis=1)
    table[near[:, 0], near[:, 1]] = values
    for o in ((1, 0), (0, 1), (1, 1)):
        if max(o) >= size:
            continue
        total = 0.0
        for quad, pts, wts in quads:
            corners = {(quad[0] + i, quad[1] + j) for i in (0, 1) for j in (0, 1)}
            if (-o[0], -o[1]) in corners:
                total += _corner_polar(o, quad, s, 2 * order + 4)
            else:
                z = np.asarray(o, dtype=float) + pts
                g = np.prod(1.0 - np.abs(pts), axis=-1)
                total += float(np.sum(np.linalg.norm(z, axis=-1) ** (-p) * g * wts))
        table[o] = total
    table[0, 0] = np.nan
    return table


def pair_weights(n: int, s: float, offsets: Array, cfg: GeometryConfig) -> Array:
    """w(o) for integer offset vectors of shape (..., n)."""
    offsets = np.abs(np.asarray(offsets, dtype=int))
    if n == 1:
        return _pair_weights_1d(offsets[..., 0], s)
    if n == 2:
        size = int(np.max(offsets)) + 1 if offsets.size else 1
        table = _pair_table_2d(float(s), max(size, 2), cfg.pair_order, cfg.exact_pair_range)
        return table[offsets[..., 0], offsets[..., 1]]
    raise GeometryError(f"Interaction energies are implemented for n <= 2, got {n}")


def _pair_sum(A: Array, B: Array, n: int, s: float, h: float, cfg: GeometryConfig) -> float:
    """Sum over cell pairs (a in A, b in B) of the pair integral."""
    if not np.any(A) or not np.any(B):
        return 0.0
    if np.any(A & B):
        raise OverlapError("Interaction energy of overlapping sets diverges")
    flip = tuple(slice(None, None, -1) for _ in range(n))
    counts = np.rint(fftconvolve(B.astype(float), A[flip].astype(float), mode="full"))
    shape = np.asarray(A.shape)
    idx = np.argwhere(counts > 0)
    offsets = idx - (shape - 1)
    weights = pair_weights(n, s, offsets, cfg)
    return float(h ** (n - s) * np.sum(counts[tuple(idx.T)] * weights))


def _corner_angles(X: Array, lower: Array, upper: Array) -> Array:
    corners = np.array([[lower[0], lower[1]], [upper[0], lower[1]], [upper[0], upper[1]], [lower[0], upper[1]]])
    d = corners[None, :, :] - X[:, None, :]
    return np.arctan2(d[..., 1], d[..., 0])


def _rule_break_points(rule: ExteriorRule, lower: Array, upper: Array) -> Array:
    """Points where the rule's boundary meets the box sides (n = 2), padded to two."""
    pts: List[List[float]] = []
    if rule.kind == "halfspace":
        nu = np.asarray(rule.normal)
        for axis in (0, 1):
            other = 1 - axis
            if abs(nu[other]) < 1e-14:
                continue
            for side in (lower[axis], upper[axis]):
                t = (rule.offset - nu[axis] * side) / nu[other]
                if lower[other] <= t <= upper[other]:
                    p = [0.0, 0.0]
                    p[axis], p[other] = side, t
                    pts.append(p)
    elif rule.kind == "subgraph":
        assert rule.graph is not None
        for side in (lower[0], upper[0]):
            t = float(rule.graph(np.array([side])))
            if lower[1] <= t <= upper[1]:
                pts.append([side, t])
    pts = pts[:2]
    while len(pts) < 2:
        pts.append([lower[0], lower[1]])
    return np.asarray(pts)


def _ray_exit(X: Array, dirs: Array, lower: Array, upper: Array) -> Array:
    with np.errstate(divide="ignore", invalid="ignore"):
        up = (upper - X[:, None, :]) / dirs
        lo = (lower - X[:, None, :]) / dirs
    t = np.where(dirs > 0, up, np.where(dirs < 0, lo, np.inf))
    return np.maximum(np.min(t, axis=-1), 1e-300)


def _ray_outside_integral(
    rule: ExteriorRule, X: Array, dirs: Array, r_exit: Array, s: float, cfg: GeometryConfig
) -> Array:
    """Integral of r^{-1-s} over r > r_exit where X + r*dir lies in the rule's set."""
    full = r_exit ** (-s) / s
    if rule.kind == "empty":
        return np.zeros_like(r_exit)
    if rule.kind == "full":
        return full
    if rule.kind == "halfspace":
        nu = np.asarray(rule.normal)
        l0 = (X @ nu - rule.offset)[:, None]
        g = dirs @ nu
        with np.errstate(divide="ignore", invalid="ignore"):
            rstar = np.where(g != 0, -l0 / np.where(g != 0, g, 1.0), np.inf)
        start = np.maximum(r_exit, np.where(np.isfinite(rstar), rstar, r_exit))
        entering = start ** (-s) / s
        stop = np.where(np.isfinite(rstar) & (rstar > r_exit), rstar, r_exit)
        leaving = (r_exit ** (-s) - stop ** (-s)) / s
        level_zero = np.broadcast_to(np.where(l0 < 0, 1.0, 0.0), r_exit.shape) * full
        return np.where(g < 0, entering, np.where(g > 0, leaving, level_zero))
    factors = np.geomspace(1.0, 1e4, cfg.ray_samples)
    R = r_exit[..., None] * factors
    pts = X[:, None, None, :] + R[..., None] * dirs[:, :, None, :]
    inside = rule.contains(pts)
    ra, rb = R[..., :-1], R[..., 1:]
    ia, ib = inside[..., :-1], inside[..., 1:]
    rc = rb.copy()
    cross = np.nonzero(ia != ib)
    if cross[0].size:
        lo, hi = ra[cross], rb[cross]
        base = X[cross[0]]
        d = dirs[cross[0], cross[1]]
        mem_lo = ia[cross]
        for _ in range(cfg.bisection_steps):
            mid = 0.5 * (lo + hi)
            same = rule.contains(base + mid[:, None] * d) == mem_lo
            lo, hi = np.where(same, mid, lo), np.where(same, hi, mid)
        rc[cross] = 0.5 * (lo + hi)
    seg = ia * (ra ** (-s) - rc ** (-s)) / s + ib * (rc ** (-s) - rb ** (-s)) / s
    return np.sum(seg, axis=-1) + inside[..., -1] * R[..., -1] ** (-s) / s


def _ray_directions(X: Array, rule: ExteriorRule, lower: Array, upper: Array, order: int) -> Tuple[Array, Array]:
    """Per-node directions and weights, split at box corners and boundary exits."""
    n = X.shape[1]
    if n == 1:
        dirs = np.broadcast_to(np.array([[1.0], [-1.0]]), (X.shape[0], 2, 1))
        return dirs, np.ones((X.shape[0], 2))
    breaks = _rule_break_points(rule, lower, upper)
    d = breaks[None, :, :] - X[:, None, :]
    angles = np.concatenate([_corner_angles(X, lower, upper), np.arctan2(d[..., 1], d[..., 0])], axis=1)
    angles = np.sort(np.mod(angles, 2.0 * math.pi), axis=1)
    edges = np.concatenate([angles, angles[:, :1] + 2.0 * math.pi], axis=1)
    x, w = gauss_legendre(order)
    width = np.diff(edges, axis=1)
    theta = (edges[:, :-1, None] + width[..., None] * x).reshape(X.shape[0], -1)
    weights = (width[..., None] * w).reshape(X.shape[0], -1)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1), weights


def exterior_interaction(
    E: LatticeSet, cells: Array, rule: ExteriorRule, s: float, cfg: GeometryConfig
) -> float:
    """Sum over the marked cells of the interaction with the rule's set outside the box."""
    if rule.kind == "empty" or not np.any(cells):
        return 0.0
    lower, upper = np.asarray(E.lower), np.asarray(E.upper)
    centers = E.centers()[cells]
    pts, wts = tensor_gauss([-0.5] * E.dim, [0.5] * E.dim, cfg.cell_order)
    nodes = (centers[:, None, :] + E.h * pts[None, :, :]).reshape(-1, E.dim)
    node_w = np.tile(wts, centers.shape[0])

    def chunk_total(index: Array) -> float:
        X = nodes[index]
        dirs, ray_w = _ray_directions(X, rule, lower, upper, cfg.ray_order)
        r_exit = _ray_exit(X, dirs, lower, upper)
        vals = _ray_outside_integral(rule, X, dirs, r_exit, s, cfg)
        return float(np.sum(node_w[index] * np.sum(ray_w * vals, axis=1)))

    chunks = np.array_split(np.arange(nodes.shape[0]), max(1, nodes.shape[0] // 1024))
    parts = parallel_map(chunk_total, chunks, cfg.threads)
    return E.h**E.dim * float(sum(parts))


def _check_same_grid(A: LatticeSet, B: LatticeSet) -> None:
    if A.dim != B.dim or A.lower != B.lower or A.upper != B.upper or A.h != B.h:
        raise GeometryError("Lattice sets must share box and spacing")


def interaction_energy(
    A: LatticeSet, B: LatticeSet, s: float, cfg: Optional[GeometryConfig] = None
) -> float:
    """L(A, B): double integral of |x - y|^{-n-s} over A x B.

    Raises:
        OverlapError: If the sets share cells.
        GeometryError: If both sets are unbounded outside the box.
    """
    cfg = cfg or GeometryConfig()
    _check_same_grid(A, B)
    if A.exterior.kind != "empty" and B.exterior.kind != "empty":
        raise GeometryError("At most one of the sets may extend outside the box")
    total = _pair_sum(A.indicator, B.indicator, A.dim, s, A.h, cfg)
    total += exterior_interaction(A, A.indicator, B.exterior, s, cfg)
    total += exterior_interaction(B, B.indicator, A.exterior, s, cfg)
    return total


@dataclass(frozen=True)
class Box:
    """Axis-aligned region Omega."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def scaled(self, factor: float) -> "Box":
        return Box(tuple(factor * v for v in self.lower), tuple(factor * v for v in self.upper))


def _omega_mask(E: LatticeSet, omega: Box) -> Array:
    lo = (np.asarray(omega.lower) - np.asarray(E.lower)) / E.h
    hi = (np.asarray(omega.upper) - np.asarray(E.lower)) / E.h
    if np.any(np.abs(lo - np.round(lo)) > 1e-9) or np.any(np.abs(hi - np.round(hi)) > 1e-9):
        raise GeometryError("Omega must be aligned with the lattice cells")
    lo, hi = np.round(lo).astype(int), np.round(hi).astype(int)
    if np.any(lo < 2) or np.any(hi > np.asarray(E.shape) - 2):
        raise GeometryError("Omega needs a margin of at least two cells inside the lattice box")
    mask = np.zeros(E.shape, dtype=bool)
    mask[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return mask


def fractional_perimeter(
    E: LatticeSet, omega: Box, s: float, cfg: Optional[GeometryConfig] = None
) -> float:
    """Per(E, Omega, s) = L(E in Omega, CE in Omega) + L(E in Omega, CE off Omega) + L(E off Omega, CE in Omega)."""
    cfg = cfg or GeometryConfig()
    if not 0.0 < s < 1.0:
        raise GeometryError(f"s must lie in (0, 1), got {s}")
    mask = _omega_mask(E, omega)
    inside, outside = E.indicator, ~E.indicator
    a_in, b_in = inside & mask, outside & mask
    total = _pair_sum(a_in, outside, E.dim, s, E.h, cfg)
    total += _pair_sum(inside & ~mask, b_in, E.dim, s, E.h, cfg)
    total += exterior_interaction(E, a_in, E.exterior.complement(), s, cfg)
    total += exterior_interaction(E, b_in, E.exterior, s, cfg)
    logger.debug(f"Per(s={s}) on {E.shape} cells: {total:.10g}")
    return total


@dataclass(frozen=True)
class PerimeterStudy:
    """Perimeters on a refinement pair and their extrapolation."""

    hs: Tuple[float, float]
    values: Tuple[float, float]
    extrapolated: float
    rate: float


def perimeter_refinement(
    build: Callable[[float], LatticeSet],
    omega: Box,
    s: float,
    hs: Tuple[float, float],
    cfg: Optional[GeometryConfig] = None,
) -> PerimeterStudy:
    """Perimeter at two spacings plus Richardson extrapolation with rate h^{1-s}."""
    values = tuple(fractional_perimeter(build(h), omega, s, cfg) for h in hs)
    q = (hs[0] / hs[1]) ** (1.0 - s)
    extrapolated = (q * values[1] - values[0]) / (q - 1.0)
    return PerimeterStudy(hs=hs, values=values, extrapolated=extrapolated, rate=1.0 - s)  # type: ignore[arg-type]


# --------------------------------------------------------------------------
# Curvature integrals
# --------------------------------------------------------------------------

WeightFunc = Callable[[Array], Array]


class _ArcFamily:
    """Great-circle arcs covering S^{n-1}, n in {2, 3}, with cell edges."""

    def __init__(self, n: int, cfg: GeometryConfig):
        self.n = n
        if n == 2:
            m = cfg.angular_cells
            self.edges = (np.arange(m + 1) + 0.5) * (2.0 * math.pi / m)
            self.phi = np.zeros(1)
            self.phi_w = np.ones(1)
        else:
            self.edges = np.linspace(0.0, math.pi, cfg.polar_cells + 1)
            k = cfg.azimuth_cells
            self.phi = (np.arange(k) + 0.5) * (2.0 * math.pi / k)
            self.phi_w = np.full(k, 2.0 * math.pi / k)

    def direction(self, theta: Array, phi: Array) -> Array:
        if self.n == 2:
            return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        st = np.sin(theta)
        phi = np.broadcast_to(phi, theta.shape)
        return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)

    def density(self, theta: Array) -> Array:
        return np.ones_like(theta) if self.n == 2 else np.sin(theta)

    def measure(self, a: Array, b: Array) -> Array:
        return (b - a) if self.n == 2 else (np.cos(a) - np.cos(b))


def _shell_function(
    level: LevelFunc, x: Array, cfg: GeometryConfig, weight: Optional[WeightFunc] = None
) -> Callable[[Array], Array]:
    """r -> integral over |w| = r (unit sphere measure) of weight(w) * (chi_E - chi_CE)(x + w)."""
    n = x.size
    if n == 1:
        dirs = np.array([[1.0], [-1.0]])

        def shell_1d(r: Array) -> Array:
            w = r[:, None, None] * dirs[None, :, :]
            sign = np.where(level(x + w) < 0, 1.0, -1.0)
            if weight is not None:
                sign = sign * weight(w)
            return np.sum(sign, axis=1)

        return shell_1d
    arcs = _ArcFamily(n, cfg)
    gx, gw = gauss_legendre(cfg.piece_order)
    per_radius = arcs.phi.size * arcs.edges.size
    chunk = max(1, (1 << 18) // per_radius)

    def piece_integral(r: Array, a: Array, b: Array, phi: Array) -> Array:
        if weight is None:
            return arcs.measure(a, b)
        t = a[..., None] + (b - a)[..., None] * gx
        w = r[..., None, None] * arcs.direction(t, phi[..., None])
        vals = arcs.density(t) * weight(w)
        return (b - a) * np.sum(vals * gw, axis=-1)

    def shell_chunk(r: Array) -> Array:
        m = r.size
        theta = np.broadcast_to(arcs.edges, (m, arcs.phi.size, arcs.edges.size))
        phi = np.broadcast_to(arcs.phi[None, :, None], theta.shape)
        w = r[:, None, None, None] * arcs.direction(theta, phi)
        inside = level(x + w) < 0
        a, b = theta[..., :-1], theta[..., 1:]
        ph = phi[..., :-1]
        ia, ib = inside[..., :-1], inside[..., 1:]
        c = np.array(b)
        cross = np.nonzero(ia != ib)
        if cross[0].size:
            lo, hi = a[cross].copy(), b[cross].copy()
            rr, pp, mem_lo = r[cross[0]], ph[cross], ia[cross]
            for _ in range(cfg.bisection_steps):
                mid = 0.5 * (lo + hi)
                same = (level(x + rr[:, None] * arcs.direction(mid, pp)) < 0) == mem_lo
                lo, hi = np.where(same, mid, lo), np.where(same, hi, mid)
            c[cross] = 0.5 * (lo + hi)
        sa, sb = np.where(ia, 1.0, -1.0), np.where(ib, 1.0, -1.0)
        rb = np.broadcast_to(r[:, None, None], a.shape)
        pieces = sa * piece_integral(rb, a, c, ph) + sb * piece_integral(rb, c, b, ph)
        return np.sum(np.sum(pieces, axis=-1) * arcs.phi_w, axis=-1)

    def shell(r: Array) -> Array:
        r = np.asarray(r, dtype=float)
        return np.concatenate([shell_chunk(part) for part in np.array_split(r, max(1, -(-r.size // chunk)))])

    return shell


def _radial_estimate(
    shell: Callable[[Array], Array],
    s: float,
    r_lo: float,
    r_hi: float,
    cfg: GeometryConfig,
) -> IntegralEstimate:
    """Integral of r^{-1-s} S(r) over [r_lo, r_hi]; r_lo = 0 adds the linear near model."""

    def f(r: Array) -> Array:
        r = np.asarray(r, dtype=float)
        return r ** (-1.0 - s) * shell(r)

    head, head_err = 0.0, 0.0
    start = r_lo
    if r_lo == 0.0:
        start = min(cfg.inner_radius, 0.5 * r_hi)
        f_rho, f_half = f(np.array([start, 0.5 * start]))
        head = float(power_law_head(f_rho, start, -s))
        head_err = float(power_law_head_error(f_rho, f_half, start, -s))
    res = integrate_radial(f, geometric_edges(start, r_hi), cfg.radial_order, cfg.tol, cfg.max_refinements)
    return IntegralEstimate(value=head + float(res.value), error=head_err + float(res.error))


def _far_scale(E: LatticeSet, x: Array) -> float:
    """Width U of the slab around x outside which the set is a half-space."""
    rule = E.exterior
    if rule.kind == "halfspace":
        return abs(float(rule.level(x)))
    u = rule.graph
    assert u is not None
    if math.isfinite(u.sup_bound):
        return u.sup_bound + abs(float(x[-1]))
    if u.name in ("affine", "constant") and u.has_gradient:
        slope = u.gradient(np.zeros(u.dim))
        return abs(float(rule.level(x))) / math.sqrt(1.0 + float(slope @ slope))
    raise TailBoundError(f"Graph '{u.name}' is unbounded; the far tail cannot be bounded")


def _far_field(E: LatticeSet, x: Array, s: float, cfg: GeometryConfig) -> Tuple[float, float, float]:
    """Outer radius, tail value and tail error of the (chi_E - chi_CE) integral."""
    n = E.dim
    corners = np.array(np.meshgrid(*zip(E.lower, E.upper), indexing="ij")).reshape(n, -1).T
    r_box = float(np.max(np.linalg.norm(corners - x, axis=1))) * (1.0 + 1e-9)
    if E.exterior.kind in ("empty", "full"):
        sign = -1.0 if E.exterior.kind == "empty" else 1.0
        return r_box, sign * sphere_area(n) * r_box ** (-s) / s, 0.0
    U = _far_scale(E, x)
    if U == 0.0:
        return r_box, 0.0, 0.0
    K = 4.0 * math.pi * (sphere_area(n - 1) if n > 1 else 1.0)
    r_max = max(r_box, (10.0 * K * U / ((1.0 + s) * cfg.tol)) ** (1.0 / (1.0 + s)))
    return r_max, 0.0, K * U * r_max ** (-1.0 - s) / (1.0 + s)


def _check_boundary_point(E: LatticeSet, x: Array, cfg: GeometryConfig) -> None:
    if not E.resolvable:
        raise BoundaryResolutionError("Boundary is not resolvable: the set carries no level description")
    value = float(E.level(x))
    if abs(value) > cfg.boundary_tol:
        raise BoundaryResolutionError(f"Point {x.tolist()} is not on the boundary (level {value:.3e})")


def nonlocal_mean_curvature_estimate(
    E: LatticeSet, x: Sequence[float], s: float, cfg: Optional[GeometryConfig] = None
) -> IntegralEstimate:
    """Principal value of the integral of (chi_CE - chi_E)(y) / |x - y|^{n+s}.

    Positive for convex sets. Symmetric shells around ``x`` pair each point
    with its reflection, so the leading singularity cancels exactly.

    Raises:
        BoundaryResolutionError: If ``x`` is not on a resolvable boundary.
    """
    cfg = cfg or GeometryConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_boundary_point(E, x, cfg)
    r_max, tail, tail_err = _far_field(E, x, s, cfg)
    core = _radial_estimate(_shell_function(E.level, x, cfg), s, 0.0, r_max, cfg)
    return IntegralEstimate(value=-(core.value + tail), error=core.error + tail_err)


def nonlocal_mean_curvature(
    E: LatticeSet, x: Sequence[float], s: float, cfg: Optional[GeometryConfig] = None
) -> float:
    """Value of :func:`nonlocal_mean_curvature_estimate`."""
    return nonlocal_mean_curvature_estimate(E, x, s, cfg).value


def check_containment(E: LatticeSet, x: Array, W: GraphWindow) -> None:
    """The boundary inside K_R lies in B_R x [-R/8, R/8] and x in B_{R/2} x [-R/8, R/8].

    Raises:
        ContainmentError: If either condition fails.
    """
    if E.exterior.kind != "subgraph" or E.dim < 2:
        raise ContainmentError("The windowed curvature needs a subgraph set with n >= 2")
    u = E.exterior.graph
    assert u is not None
    R, d = W.R, E.dim - 1
    grid = np.linspace(-R, R, 401 if d == 1 else 61)
    pts = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = pts[np.linalg.norm(pts, axis=1) <= R]
    height = float(np.max(np.abs(u(pts))))
    if height > R / 8.0 + 1e-12:
        raise ContainmentError(f"Graph leaves the slab |x_n| <= R/8 inside B_R (max height {height:.4g})")
    if np.linalg.norm(x[:-1]) >= R / 2.0 or abs(x[-1]) > R / 8.0 + 1e-12:
        raise ContainmentError(f"Point {x.tolist()} lies outside B_(R/2) x [-R/8, R/8]")


def windowed_curvature_estimate(
    E: LatticeSet,
    x: Sequence[float],
    W: GraphWindow,
    s: float,
    cfg: Optional[GeometryConfig] = None,
) -> IntegralEstimate:
    """Integral of eta_R(y - x) (chi_E - chi_CE)(y) / |x - y|^{n+s}.

    Raises:
        ContainmentError: If the containment precondition fails.
    """
    cfg = cfg or GeometryConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    check_containment(E, x, W)
    _check_boundary_point(E, x, cfg)
    shell = _shell_function(E.level, x, cfg, weight=W.eta)
    return _radial_estimate(shell, s, 0.0, W.R / math.sqrt(2.0), cfg)


def windowed_curvature(
    E: LatticeSet,
    x: Sequence[float],
    W: GraphWindow,
    s: float,
    cfg: Optional[GeometryConfig] = None,
) -> float:
    """Value of :func:`windowed_curvature_estimate`."""
    return windowed_curvature_estimate(E, x, W, s, cfg).value


def far_field_estimate(
    E: LatticeSet,
    x: Sequence[float],
    W: GraphWindow,
    s: float,
    cfg: Optional[GeometryConfig] = None,
) -> IntegralEstimate:
    """Integral of (1 - eta_R(y - x)) (chi_E - chi_CE)(y) / |x - y|^{n+s}, for any x.

    Raises:
        TailBoundError: If the truncated tail cannot be bounded.
    """
    cfg = cfg or GeometryConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    r_max, tail, tail_err = _far_field(E, x, s, cfg)
    if tail_err > cfg.tol:
        raise TailBoundError(f"Far-field tail bound {tail_err:.3e} exceeds tolerance {cfg.tol:.3e}")
    shell = _shell_function(E.level, x, cfg, weight=lambda w: 1.0 - W.eta(w))
    core = _radial_estimate(shell, s, 0.25 * W.R, max(r_max, W.R), cfg)
    return IntegralEstimate(value=core.value + tail, error=core.error + tail_err)


def far_field_bound(W: GraphWindow, n: int, s: float, cfg: Optional[GeometryConfig] = None) -> float:
    """Integral of (1 - eta_R(z)) |z|^{-n-s}, an upper bound for |Psi_R|."""
    cfg = cfg or GeometryConfig()
    center = np.zeros(n)
    whole: LevelFunc = lambda y: np.full(np.shape(y)[:-1], -1.0)  # noqa: E731
    shell = _shell_function(whole, center, cfg, weight=lambda w: 1.0 - W.eta(w))
    outer = math.sqrt(2.0) * W.R
    core = _radial_estimate(shell, s, 0.25 * W.R, outer, cfg)
    return core.value + sphere_area(n) * outer ** (-s) / s
