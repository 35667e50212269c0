"""Kernel construction, mollification and structural certification.

A kernel is stored as a sum of separable components A_t(x) B_t(w) whenever
possible; mollification and the Dirichlet assembly work component by
component and fall back to the full (x, w) evaluator otherwise.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import qmc

from nlsurf.core.engine.cubature import sphere_area, sphere_rule, tensor_gauss
from nlsurf.core.engine.fields import multi_indices, smooth_step
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.errors import KernelError
from nlsurf.core.utils import parallel_map

logger = logging.getLogger("nlsurf.kernels")

Array = np.ndarray
Normalization = Literal["scaled", "classical"]


def fractional_laplacian_constant(n: int, sigma: float) -> float:
    """c_{n,sigma} with (-Laplacian)^{sigma/2} u = c * PV integral of (u(x)-u(y))/|x-y|^{n+sigma}."""
    return (
        sigma
        * 2.0 ** (sigma - 1.0)
        * math.gamma(0.5 * (n + sigma))
        / (math.pi ** (0.5 * n) * math.gamma(1.0 - 0.5 * sigma))
    )


def normalization_scale(n: int, sigma: float, normalization: str) -> float:
    if normalization == "scaled":
        return 2.0 - sigma
    if normalization == "classical":
        return fractional_laplacian_constant(n, sigma)
    raise KernelError(f"Unknown normalization '{normalization}'")


@dataclass(frozen=True)
class KernelComponent:
    """Separable term A(x) B(w); ``x_factor`` None means A = 1.

    Radial components also carry ``profile`` with B(w) = profile(|w|).
    """

    w_factor: Callable[[Array], Array]
    x_factor: Optional[Callable[[Array], Array]] = None
    profile: Optional[Callable[[Array], Array]] = None

    @property
    def radial(self) -> bool:
        return self.profile is not None


@dataclass(frozen=True)
class KernelSpec:
    """Kernel K(x, w) of order sigma with its declared structural constants."""

    n: int
    sigma: float
    components: Tuple[KernelComponent, ...] = ()
    func: Optional[Callable[[Array, Array], Array]] = None
    a0: Callable[[Array], Array] = field(default=lambda w: np.ones(np.shape(w)[:-1]))
    c0: float = 1.0
    C0: float = 1.0
    r0: float = math.inf
    eta: float = 0.0
    Ck: Tuple[float, ...] = ()
    lam: float = 1.0
    Lam: float = 1.0
    normalization: str = "scaled"
    name: str = "kernel"

    def __post_init__(self) -> None:
        if not self.components and self.func is None:
            raise KernelError("A kernel needs components or an evaluator")

    @property
    def scale(self) -> float:
        """(2 - sigma) or c_{n,sigma}, according to the normalization."""
        return normalization_scale(self.n, self.sigma, self.normalization)

    @property
    def x_independent(self) -> bool:
        return bool(self.components) and all(c.x_factor is None for c in self.components)

    @property
    def radial(self) -> bool:
        return self.x_independent and all(c.radial for c in self.components)

    def __call__(self, x: Array, w: Array) -> Array:
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        if self.func is not None:
            return np.asarray(self.func(x, w), dtype=float)
        total = 0.0
        for comp in self.components:
            term = comp.w_factor(w)
            if comp.x_factor is not None:
                term = term * comp.x_factor(x)
            total = total + term
        return np.broadcast_to(total, np.broadcast_shapes(x.shape[:-1], w.shape[:-1])).astype(float)

    def profile(self, r: Array) -> Array:
        """Radial profile of an x-independent radial kernel."""
        if not self.radial:
            raise KernelError(f"Kernel '{self.name}' is not radial")
        return sum(c.profile(np.asarray(r, dtype=float)) for c in self.components)

    def tail_mass(self, rho: float) -> float:
        """Upper bound of the integral of K over |w| > rho."""
        return self.Lam * self.scale * sphere_area(self.n) * rho ** (-self.sigma) / self.sigma


def _power(scale: float, exponent: float) -> Callable[[Array], Array]:
    return lambda r: scale * np.asarray(r, dtype=float) ** (-exponent)


def _radial(profile: Callable[[Array], Array]) -> Callable[[Array], Array]:
    return lambda w: profile(np.linalg.norm(w, axis=-1))


def derivative_constants(n: int, sigma: float, scale: float, orders: int = 6) -> Tuple[float, ...]:
    """C_j = 2 * scale * prod_{i<j} (n + sigma + 2i)."""
    p = n + sigma
    return tuple(2.0 * scale * math.prod(p + 2 * i for i in range(j)) for j in range(orders))


def _check_sigma(sigma: float) -> None:
    if not 1.0 < sigma < 2.0:
        raise KernelError(f"sigma must lie in (1, 2), got {sigma}")


def make_fractional_kernel(n: int, sigma: float, normalization: Normalization = "scaled") -> KernelSpec:
    """scale / |w|^{n+sigma} with a0 = 1 and zero closeness.

    Raises:
        KernelError: If sigma is outside (1, 2) or n < 1.
    """
    _check_sigma(sigma)
    if n < 1:
        raise KernelError(f"Dimension must be positive, got {n}")
    scale = normalization_scale(n, sigma, normalization)
    prof = _power(scale, n + sigma)
    return KernelSpec(
        n=n,
        sigma=sigma,
        components=(KernelComponent(w_factor=_radial(prof), profile=prof),),
        c0=1.0,
        C0=1.0,
        eta=0.0,
        Ck=derivative_constants(n, sigma, scale),
        normalization=normalization,
        name="fractional",
    )


def make_perturbed_kernel(
    n: int, sigma: float, amplitude: float = 0.1, normalization: Normalization = "scaled"
) -> KernelSpec:
    """scale * (1 + amplitude * sin(x_1)) / |w|^{n+sigma}."""
    base = make_fractional_kernel(n, sigma, normalization)
    comp = replace(base.components[0], x_factor=lambda x: 1.0 + amplitude * np.sin(x[..., 0]))
    return replace(
        base,
        components=(comp,),
        eta=abs(amplitude),
        Ck=tuple((1.0 + abs(amplitude)) * c for c in base.Ck),
        lam=1.0 - abs(amplitude),
        Lam=1.0 + abs(amplitude),
        name="perturbed",
    )


def make_over_singular_kernel(n: int, sigma: float, excess: float = 0.5) -> KernelSpec:
    """scale / |w|^{n+sigma+excess}, declared with the fractional constants."""
    base = make_fractional_kernel(n, sigma)
    prof = _power(base.scale, n + sigma + excess)
    return replace(
        base,
        components=(KernelComponent(w_factor=_radial(prof), profile=prof),),
        eta=0.05,
        r0=1.0,
        name="over_singular",
    )


# Structural constants of K_eps relative to K: eta grows by an offset, the rest scale.
MOLLIFIED_ETA_OFFSET = 0.2
MOLLIFIED_CK_FACTOR = 2.0
MOLLIFIED_LAM_FACTOR = 0.8
MOLLIFIED_LAM_UPPER_FACTOR = 1.2


class MollifierConfig(BaseModel):
    """Scale and quadrature order of the mollification."""

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(gt=0.0)
    conv_order: int = Field(default=8, ge=2, le=40)

    @property
    def delta(self) -> float:
        return self.epsilon**2

    def eta_eps(self, w: Array) -> Array:
        """1 on B_{eps/2}, 0 outside B_{3 eps/4}."""
        r = np.linalg.norm(np.asarray(w, dtype=float), axis=-1)
        return smooth_step(r, 0.5 * self.epsilon, 0.75 * self.epsilon)

    def conv_rule(self, n: int) -> Tuple[Array, Array]:
        """Offsets and unit-mass weights of the discrete mollifier at scale delta."""
        pts, wts = tensor_gauss([-0.75] * n, [0.75] * n, self.conv_order)
        wts = wts * smooth_step(np.linalg.norm(pts, axis=-1), 0.5, 0.75)
        return self.delta * pts, wts / np.sum(wts)

    def rhs_rule(self, n: int) -> Tuple[Array, Array]:
        """Same unit-mass mollifier at scale epsilon, for right-hand sides."""
        pts, wts = self.conv_rule(n)
        return pts * (self.epsilon / self.delta), wts

    def mass(self, n: int) -> float:
        return float(np.sum(self.conv_rule(n)[1]))


def _convolve(func: Callable[[Array], Array], offsets: Array, weights: Array) -> Callable[[Array], Array]:
    def conv(y: Array) -> Array:
        y = np.asarray(y, dtype=float)
        vals = func(y[..., None, :] - offsets)
        return np.tensordot(vals, weights, axes=([-1], [0]))

    return conv


def mollify_kernel(K: KernelSpec, m: MollifierConfig) -> KernelSpec:
    """K_eps = eta_eps * fractional + (1 - eta_eps) * (K convolved in x and w).

    Radial w-factors are mollified along a fixed axis and reused as radial
    profiles, so the result stays exactly radial.
    """
    n = K.n
    offsets, weights = m.conv_rule(n)
    frac = _power(K.scale, n + K.sigma)

    def near(r: Array) -> Array:
        return smooth_step(r, 0.5 * m.epsilon, 0.75 * m.epsilon) * frac(r)

    comps: List[KernelComponent] = [KernelComponent(w_factor=_radial(near), profile=near)]
    if K.components:
        axis = np.zeros(n)
        axis[0] = 1.0
        for comp in K.components:
            hat_b = _convolve(comp.w_factor, offsets, weights)
            hat_a = _convolve(comp.x_factor, offsets, weights) if comp.x_factor is not None else None
            if comp.radial:

                def far(r: Array, hat_b: Callable[[Array], Array] = hat_b) -> Array:
                    r = np.asarray(r, dtype=float)
                    outer = 1.0 - smooth_step(r, 0.5 * m.epsilon, 0.75 * m.epsilon)
                    vals = np.zeros(r.shape)
                    live = outer > 0
                    if np.any(live):
                        vals[live] = outer[live] * hat_b(r[live][..., None] * axis)
                    return vals

                comps.append(KernelComponent(w_factor=_radial(far), x_factor=hat_a, profile=far))
            else:

                def far_w(w: Array, hat_b: Callable[[Array], Array] = hat_b) -> Array:
                    return (1.0 - m.eta_eps(w)) * hat_b(w)

                comps.append(KernelComponent(w_factor=far_w, x_factor=hat_a))
        func = None
    else:
        base = K.func
        assert base is not None

        def func(x: Array, w: Array) -> Array:
            x = np.asarray(x, dtype=float)[..., None, None, :]
            w = np.asarray(w, dtype=float)[..., None, None, :]
            vals = base(x - offsets[:, None, :], w - offsets[None, :, :])
            hat = np.einsum("...kl,k,l->...", vals, weights, weights)
            ws = w[..., 0, 0, :]
            return m.eta_eps(ws) * frac(np.linalg.norm(ws, axis=-1)) + (1.0 - m.eta_eps(ws)) * hat

    logger.info(f"Mollified kernel '{K.name}' at epsilon={m.epsilon}")
    return replace(
        K,
        components=tuple(comps) if func is None else (),
        func=func,
        eta=K.eta + MOLLIFIED_ETA_OFFSET,
        Ck=tuple(MOLLIFIED_CK_FACTOR * c for c in K.Ck),
        lam=MOLLIFIED_LAM_FACTOR * K.lam,
        Lam=MOLLIFIED_LAM_UPPER_FACTOR * K.Lam,
        name=f"{K.name}_eps{m.epsilon:g}",
    )


def build_kernel(
    kind: str,
    n: int,
    sigma: float,
    normalization: Normalization = "scaled",
    amplitude: float = 0.1,
    epsilon: Optional[float] = None,
) -> KernelSpec:
    """Kernel from a config descriptor {type, n, sigma, normalization, amplitude, epsilon}.

    Raises:
        KernelError: If the kernel type is unknown.
    """
    if kind == "fractional":
        K = make_fractional_kernel(n, sigma, normalization)
    elif kind == "perturbed":
        K = make_perturbed_kernel(n, sigma, amplitude, normalization)
    elif kind == "over_singular":
        K = make_over_singular_kernel(n, sigma)
    else:
        raise KernelError(f"Unknown kernel type '{kind}'")
    if epsilon is not None:
        K = mollify_kernel(K, MollifierConfig(epsilon=epsilon))
    return K


# --------------------------------------------------------------------------
# Structural certification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralSample:
    """Points x, radii |w| and unit directions used by the certification."""

    x_points: Array
    radii: Array
    directions: Array


def structural_sample(
    n: int,
    r0: float = math.inf,
    seed: int = 0,
    x_count: int = 6,
    x_radius: float = 1.0,
    r_min: float = 1e-3,
    r_max: float = 10.0,
    radius_count: int = 13,
) -> StructuralSample:
    """Deterministic sample: origin plus Sobol points in B_{x_radius}, log-spaced radii."""
    sobol = qmc.Sobol(d=n, scramble=True, seed=seed)
    cloud = 2.0 * sobol.random(64) - 1.0
    cloud = cloud[np.linalg.norm(cloud, axis=1) < 1.0][: max(x_count - 1, 0)]
    x_points = np.vstack([np.zeros((1, n)), x_radius * cloud])
    top = min(r_max, 0.999 * r0) if math.isfinite(r0) else r_max
    radii = np.geomspace(r_min, top, radius_count)
    directions = sphere_rule(n, 8 if n < 3 else 4)[0]
    return StructuralSample(x_points=x_points, radii=radii, directions=directions)


_FIRST = ((-2.0, 1.0 / 12.0), (-1.0, -8.0 / 12.0), (1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0))
_SECOND = (
    (-2.0, -1.0 / 12.0),
    (-1.0, 16.0 / 12.0),
    (0.0, -30.0 / 12.0),
    (1.0, 16.0 / 12.0),
    (2.0, -1.0 / 12.0),
)


def _stencil(count: int) -> List[Tuple[Tuple[float, ...], float]]:
    """Offsets (in units of h) and weights for a count-th derivative, 4th order."""
    if count == 0:
        return [((), 1.0)]
    if count == 1:
        return [((o,), w) for o, w in _FIRST]
    if count == 2:
        return [((o,), w) for o, w in _SECOND]
    out: List[Tuple[Tuple[float, ...], float]] = []
    for (o1, w1), (o2, w2) in itertools.product(_stencil(count - 2), _SECOND):
        out.append(((sum(o1) + o2,), w1 * w2))
    merged: Dict[float, float] = {}
    for (o,), w in out:
        merged[o] = merged.get(o, 0.0) + w
    return [((o,), w) for o, w in merged.items()]


def mixed_derivative(
    func: Callable[[Array], Array], z: Array, gamma: Sequence[int], steps: Array
) -> Array:
    """Nested 4th-order finite difference of ``func`` at batched points ``z``.

    Args:
        func: Evaluator on points of shape (..., d).
        z: Points (m, d).
        gamma: Derivative counts per coordinate.
        steps: Step per coordinate, shape (m, d).
    """
    terms: List[Tuple[Array, float]] = [(np.zeros_like(z), 1.0)]
    scale = np.ones(z.shape[0])
    for axis, count in enumerate(gamma):
        if count == 0:
            continue
        new_terms = []
        for shift, weight in terms:
            for (off,), w in _stencil(count):
                moved = shift.copy()
                moved[:, axis] += off * steps[:, axis]
                new_terms.append((moved, weight * w))
        terms = new_terms
        scale = scale * steps[:, axis] ** count
    total = np.zeros(z.shape[0])
    for shift, weight in terms:
        total = total + weight * func(z + shift)
    return total / scale


def _gamma_split(gamma: Tuple[int, ...], n: int) -> Tuple[int, int]:
    return sum(gamma[:n]), sum(gamma[n:])


def verify_structural_bounds(
    K: KernelSpec,
    k: int = 1,
    sample: Optional[StructuralSample] = None,
    threads: Optional[int] = None,
) -> Report:
    """Certify closeness to a0, the a0 bounds, derivative bounds and pinching.

    Failures are reported as failed rows, never raised.
    """
    n = K.n
    sample = sample or structural_sample(n, K.r0)
    p = n + K.sigma
    scale = K.scale
    xs = sample.x_points
    ws = (sample.radii[:, None, None] * sample.directions[None, :, :]).reshape(-1, n)
    xx = np.repeat(xs, ws.shape[0], axis=0)
    ww = np.tile(ws, (xs.shape[0], 1))
    rr = np.linalg.norm(ww, axis=1)
    report = Report(command="certify-kernel", metadata={"kernel": K.name, "k": str(k)})
    logger.info(f"Certifying kernel '{K.name}' on {xx.shape[0]} sample pairs up to order {k + 1}")

    vals = K(xx, ww)
    normalized = vals * rr**p / scale
    a0_vals = K.a0(ww)
    inside = rr <= K.r0
    if np.any(inside):
        dev = float(np.max(np.abs(normalized[inside] - a0_vals[inside])))
        report.add(CheckRow.bound("closeness", dev, max(K.eta, 1e-9), eta=K.eta))
        ratio = normalized[inside]
        report.add(CheckRow.bound("pinching_lower", K.lam / float(np.min(ratio)), 1.0 + 1e-9))
        report.add(CheckRow.bound("pinching_upper", float(np.max(ratio)) / K.Lam, 1.0 + 1e-9))
    report.add(CheckRow.bound("a0_lower", K.c0 / float(np.min(a0_vals)), 1.0 + 1e-9, c0=K.c0))
    a0_steps = 1e-4 * rr[:, None] * np.ones((1, n))
    grad_a0 = np.stack(
        [mixed_derivative(K.a0, ww, tuple(int(i == a) for i in range(n)), a0_steps) for a in range(n)],
        axis=1,
    )
    report.add(
        CheckRow.bound(
            "a0_gradient",
            float(np.max(np.linalg.norm(grad_a0, axis=1) * rr)) / K.C0,
            1.0 + 1e-6,
        )
    )

    z = np.hstack([xx, ww])
    steps = np.hstack([np.full((z.shape[0], n), 1e-3), 1e-4 * rr[:, None] * np.ones((1, n))])

    def joint(zz: Array) -> Array:
        return K(zz[..., :n], zz[..., n:])

    def worst_for_order(order: int) -> Tuple[int, float, str]:
        if order >= len(K.Ck):
            return order, math.inf, "missing constant"
        worst, where = 0.0, ""
        for gamma in multi_indices(2 * n, order):
            d = mixed_derivative(joint, z, gamma, steps)
            _, w_order = _gamma_split(gamma, n)
            ratio = np.abs(d) * rr ** (p + w_order) / K.Ck[order]
            idx = int(np.argmax(ratio))
            if ratio[idx] > worst:
                worst, where = float(ratio[idx]), f"gamma={gamma} |w|={rr[idx]:.3g}"
        return order, worst, where

    for order, worst, where in parallel_map(worst_for_order, range(k + 2), threads):
        row = report.add(CheckRow.bound(f"derivative_order_{order}", worst, 1.0 + 1e-6, order=order))
        if not row.passed:
            logger.warning(f"Kernel '{K.name}' violates derivative bound of order {order} at {where}")
    for row in report.failures:
        report.metadata[f"violated:{row.label}"] = format(row.value, ".6g")
    return report


def pointwise_mollification_error(K: KernelSpec, m: MollifierConfig, x: Array, w: Array) -> float:
    """|K_eps(x, w) - K(x, w)| / K(x, w) at one pair."""
    Ke = mollify_kernel(K, m)
    base = float(K(np.asarray(x, dtype=float), np.asarray(w, dtype=float)))
    return abs(float(Ke(np.asarray(x, dtype=float), np.asarray(w, dtype=float))) - base) / base
