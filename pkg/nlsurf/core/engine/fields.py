"""Scalar fields, the second difference and the scalar functions F, p and U.

Points are numpy arrays whose last axis is the space dimension, so every
field evaluates whole batches of points at once.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special
from scipy.interpolate import RegularGridInterpolator

from nlsurf.core.errors import MissingGradientError, NonlocalError, QuadratureError

logger = logging.getLogger("nlsurf.fields")

Array = np.ndarray
PointFunc = Callable[[Array], Array]
MultiIndex = Tuple[int, ...]


def _psi(t: Array) -> Array:
    safe = np.where(t > 0, t, 1.0)
    return np.where(t > 0, np.exp(-1.0 / safe), 0.0)


def smooth_step(t: Array, a: float, b: float) -> Array:
    """C-infinity step equal to 1 for t <= a and 0 for t >= b."""
    t = np.asarray(t, dtype=float)
    tau = np.clip((b - t) / (b - a), 0.0, 1.0)
    up, down = _psi(tau), _psi(1.0 - tau)
    return up / (up + down)


def smooth_step_derivative(t: Array, a: float, b: float) -> Array:
    """Derivative in t of :func:`smooth_step`."""
    t = np.asarray(t, dtype=float)
    tau = np.clip((b - t) / (b - a), 0.0, 1.0)
    up, down = _psi(tau), _psi(1.0 - tau)
    inner = (tau > 0) & (tau < 1)
    tau_s = np.where(inner, tau, 0.5)
    d_up = np.where(inner, up / tau_s**2, 0.0)
    d_down = np.where(inner, down / (1.0 - tau_s) ** 2, 0.0)
    ds = (d_up * down + up * d_down) / (up + down) ** 2
    return -ds / (b - a)


def phi(t: Array) -> Array:
    """Cutoff profile: 1 on |t| <= 1/4, 0 on |t| >= 1/2."""
    return smooth_step(np.abs(t), 0.25, 0.5)


def _as_points(x: Array, dim: int) -> Array:
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x


@dataclass(frozen=True)
class ScalarField:
    """Real-valued function on R^d with optional derivative data.

    Attributes:
        dim: Space dimension d.
        func: Batched evaluator, (..., d) -> (...).
        grad_func: Batched gradient, (..., d) -> (..., d), if known.
        hess_func: Batched Hessian, (..., d) -> (..., d, d), if known.
        deriv_func: Exact partial derivative for a multi-index of counts.
        support_radius: Radius outside which the field vanishes, or inf.
        holder_beta: Claimed C^{1,beta} class.
        sup_bound: Known L-infinity bound (inf when unbounded).
        name: Family name, used in reports.
    """

    dim: int
    func: PointFunc
    grad_func: Optional[PointFunc] = None
    hess_func: Optional[PointFunc] = None
    deriv_func: Optional[Callable[[MultiIndex, Array], Array]] = None
    support_radius: float = math.inf
    holder_beta: float = 1.0
    sup_bound: float = math.inf
    name: str = "field"
    params: Dict[str, float] = field(default_factory=dict)

    def __call__(self, x: Array) -> Array:
        return np.asarray(self.func(_as_points(x, self.dim)), dtype=float)

    @property
    def has_gradient(self) -> bool:
        return self.grad_func is not None

    def gradient(self, x: Array) -> Array:
        """Gradient at ``x``.

        Raises:
            MissingGradientError: If the field carries no gradient.
        """
        if self.grad_func is None:
            raise MissingGradientError(f"Field '{self.name}' has no gradient")
        return np.asarray(self.grad_func(_as_points(x, self.dim)), dtype=float)

    def hessian(self, x: Array, step: float = 1e-3) -> Array:
        """Hessian at ``x``, analytic when known, else 4th-order differences."""
        x = _as_points(x, self.dim)
        if self.hess_func is not None:
            return np.asarray(self.hess_func(x), dtype=float)
        logger.debug(f"Field '{self.name}' has no Hessian, using differences with step={step:g}")
        return finite_difference_hessian(self, x, step)

    def derivative(self, gamma: MultiIndex, x: Array) -> Array:
        """Exact partial derivative for ``gamma`` (counts per coordinate).

        Raises:
            NotImplementedError: If no exact rule exists for this order.
        """
        x = _as_points(x, self.dim)
        order = sum(gamma)
        if self.deriv_func is not None:
            return np.asarray(self.deriv_func(gamma, x), dtype=float)
        if order == 0:
            return self(x)
        if order == 1 and self.grad_func is not None:
            return self.gradient(x)[..., gamma.index(1)]
        if order == 2 and self.hess_func is not None:
            idx = [i for i, c in enumerate(gamma) for _ in range(c)]
            return self.hessian(x)[..., idx[0], idx[1]]
        raise NotImplementedError(f"No exact derivative of order {order} for '{self.name}'")


FD4_OFFSETS = (-2.0, -1.0, 1.0, 2.0)
FD4_WEIGHTS = (1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0)


def finite_difference_gradient(func: PointFunc, x: Array, step: float) -> Array:
    """Fourth-order centered gradient of a batched evaluator."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    out = np.zeros(x.shape)
    for a in range(dim):
        e = np.zeros(dim)
        e[a] = step
        out[..., a] = sum(w * func(x + o * e) for o, w in zip(FD4_OFFSETS, FD4_WEIGHTS)) / step
    return out


def finite_difference_hessian(func: PointFunc, x: Array, step: float) -> Array:
    """Fourth-order centered Hessian of a batched evaluator."""
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    out = np.zeros(x.shape + (dim,))
    f0 = func(x)
    for a in range(dim):
        ea = np.zeros(dim)
        ea[a] = step
        out[..., a, a] = (
            -func(x + 2 * ea) + 16 * func(x + ea) - 30 * f0 + 16 * func(x - ea) - func(x - 2 * ea)
        ) / (12 * step**2)
        for b in range(a + 1, dim):
            eb = np.zeros(dim)
            eb[b] = step
            mixed = 0.0
            for oa, wa in zip(FD4_OFFSETS, FD4_WEIGHTS):
                for ob, wb in zip(FD4_OFFSETS, FD4_WEIGHTS):
                    mixed = mixed + wa * wb * func(x + oa * ea + ob * eb)
            out[..., a, b] = out[..., b, a] = mixed / step**2
    return out


# --------------------------------------------------------------------------
# Field families
# --------------------------------------------------------------------------


def constant_field(value: float, dim: int) -> ScalarField:
    return ScalarField(
        dim=dim,
        func=lambda x: np.full(x.shape[:-1], float(value)),
        grad_func=lambda x: np.zeros(x.shape),
        hess_func=lambda x: np.zeros(x.shape + (dim,)),
        deriv_func=lambda g, x: np.full(x.shape[:-1], float(value) if sum(g) == 0 else 0.0),
        sup_bound=abs(value),
        name="constant",
        params={"value": value},
    )


def affine_field(slope: Sequence[float], offset: float = 0.0) -> ScalarField:
    a = np.asarray(slope, dtype=float)
    dim = a.size

    def deriv(g: MultiIndex, x: Array) -> Array:
        order = sum(g)
        if order == 0:
            return x @ a + offset
        if order == 1:
            return np.full(x.shape[:-1], a[g.index(1)])
        return np.zeros(x.shape[:-1])

    return ScalarField(
        dim=dim,
        func=lambda x: x @ a + offset,
        grad_func=lambda x: np.broadcast_to(a, x.shape).copy(),
        hess_func=lambda x: np.zeros(x.shape + (dim,)),
        deriv_func=deriv,
        sup_bound=abs(offset) if not np.any(a) else math.inf,
        name="affine",
    )


def paraboloid_field(dim: int, scale: float = 1.0) -> ScalarField:
    """``scale * |x|^2 / 2``."""
    return ScalarField(
        dim=dim,
        func=lambda x: 0.5 * scale * np.sum(x * x, axis=-1),
        grad_func=lambda x: scale * x,
        hess_func=lambda x: np.broadcast_to(scale * np.eye(dim), x.shape + (dim,)).copy(),
        name="paraboloid",
        params={"scale": scale},
    )


def gaussian_field(
    dim: int,
    amplitude: float = 1.0,
    width: float = 1.0,
    center: Optional[Sequence[float]] = None,
) -> ScalarField:
    """``amplitude * exp(-|x - center|^2 / width^2)``."""
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)

    def value(x: Array) -> Array:
        return amplitude * np.exp(-np.sum((x - c) ** 2, axis=-1) / width**2)

    def grad(x: Array) -> Array:
        return (-2.0 / width**2) * (x - c) * value(x)[..., None]

    def hess(x: Array) -> Array:
        d = x - c
        outer = d[..., :, None] * d[..., None, :]
        return value(x)[..., None, None] * (4.0 * outer / width**4 - 2.0 * np.eye(dim) / width**2)

    return ScalarField(
        dim=dim,
        func=value,
        grad_func=grad,
        hess_func=hess,
        sup_bound=abs(amplitude),
        name="gaussian",
        params={"amplitude": amplitude, "width": width, **({"center": c.tolist()} if center is not None else {})},
    )


def cosine_field(wavevector: Sequence[float], amplitude: float = 1.0) -> ScalarField:
    """``amplitude * cos(k . x)``."""
    k = np.asarray(wavevector, dtype=float)
    dim = k.size
    return ScalarField(
        dim=dim,
        func=lambda x: amplitude * np.cos(x @ k),
        grad_func=lambda x: -amplitude * np.sin(x @ k)[..., None] * k,
        hess_func=lambda x: -amplitude * np.cos(x @ k)[..., None, None] * np.outer(k, k),
        sup_bound=abs(amplitude),
        name="cosine",
    )


def _radial_cutoff(r: Array, radius: float) -> Tuple[Array, Array]:
    return smooth_step(r, 0.5 * radius, radius), smooth_step_derivative(r, 0.5 * radius, radius)


def smooth_bump_field(dim: int, amplitude: float = 1.0, radius: float = 1.0) -> ScalarField:
    """Compactly supported C-infinity bump, equal to ``amplitude`` on B_{radius/2}."""

    def value(x: Array) -> Array:
        return amplitude * _radial_cutoff(np.linalg.norm(x, axis=-1), radius)[0]

    def grad(x: Array) -> Array:
        r = np.linalg.norm(x, axis=-1)
        dc = _radial_cutoff(r, radius)[1]
        unit = x / np.where(r > 0, r, 1.0)[..., None]
        return amplitude * dc[..., None] * unit

    return ScalarField(
        dim=dim,
        func=value,
        grad_func=grad,
        support_radius=radius,
        sup_bound=abs(amplitude),
        name="smooth_bump",
        params={"amplitude": amplitude, "radius": radius},
    )


def holder_bump_field(
    dim: int, beta: float, amplitude: float = 1.0, radius: float = 1.0
) -> ScalarField:
    """``amplitude * cutoff(|x|) * |x|^{1+beta}``, a C^{1,beta} field singular at 0."""

    def value(x: Array) -> Array:
        r = np.linalg.norm(x, axis=-1)
        return amplitude * _radial_cutoff(r, radius)[0] * r ** (1.0 + beta)

    def grad(x: Array) -> Array:
        r = np.linalg.norm(x, axis=-1)
        c, dc = _radial_cutoff(r, radius)
        radial = (1.0 + beta) * r**beta * c + r ** (1.0 + beta) * dc
        unit = x / np.where(r > 0, r, 1.0)[..., None]
        return amplitude * radial[..., None] * unit

    return ScalarField(
        dim=dim,
        func=value,
        grad_func=grad,
        support_radius=radius,
        holder_beta=beta,
        sup_bound=abs(amplitude) * radius ** (1.0 + beta),
        name="holder_bump",
        params={"beta": beta, "amplitude": amplitude, "radius": radius},
    )


def abs_power_field(dim: int, exponent: float) -> ScalarField:
    """``|x_1|^{1+exponent}``; its gradient is only C^{0,exponent}."""

    def grad(x: Array) -> Array:
        out = np.zeros(x.shape)
        out[..., 0] = (1.0 + exponent) * np.abs(x[..., 0]) ** exponent * np.sign(x[..., 0])
        return out

    return ScalarField(
        dim=dim,
        func=lambda x: np.abs(x[..., 0]) ** (1.0 + exponent),
        grad_func=grad,
        holder_beta=exponent,
        name="abs_power",
        params={"exponent": exponent},
    )


def polynomial_field(terms: Sequence[Tuple[float, Sequence[int]]], dim: int) -> ScalarField:
    """Polynomial sum(c * x^e) with exact derivatives of every order."""
    coefs = np.array([c for c, _ in terms], dtype=float)
    exps = np.array([list(e) for _, e in terms], dtype=int).reshape(len(terms), dim)

    def deriv(g: MultiIndex, x: Array) -> Array:
        gamma = np.asarray(g, dtype=int)
        total = np.zeros(x.shape[:-1])
        for c, e in zip(coefs, exps):
            if np.any(e < gamma):
                continue
            factor = c * np.prod([math.perm(int(ei), int(gi)) for ei, gi in zip(e, gamma)])
            total = total + factor * np.prod(x ** (e - gamma), axis=-1)
        return total

    zero = tuple([0] * dim)

    def grad(x: Array) -> Array:
        return np.stack([deriv(_unit_index(dim, a), x) for a in range(dim)], axis=-1)

    def hess(x: Array) -> Array:
        out = np.zeros(x.shape + (dim,))
        for a in range(dim):
            for b in range(dim):
                g = [0] * dim
                g[a] += 1
                g[b] += 1
                out[..., a, b] = deriv(tuple(g), x)
        return out

    return ScalarField(
        dim=dim,
        func=lambda x: deriv(zero, x),
        grad_func=grad,
        hess_func=hess,
        deriv_func=deriv,
        name="polynomial",
    )


def random_polynomial(dim: int, degree: int, rng: np.random.Generator) -> ScalarField:
    """Polynomial with every monomial of degree <= ``degree`` and N(0,1) coefficients."""
    terms = [
        (float(rng.standard_normal()), e)
        for e in itertools.product(range(degree + 1), repeat=dim)
        if sum(e) <= degree
    ]
    return polynomial_field(terms, dim)


def _unit_index(dim: int, a: int) -> MultiIndex:
    g = [0] * dim
    g[a] = 1
    return tuple(g)


def lattice_field(
    axes: Sequence[Array],
    values: Array,
    inside: Callable[[Array], Array],
    exterior: ScalarField,
    fd_step: Optional[float] = None,
) -> ScalarField:
    """Lattice-backed field: multilinear interpolation where ``inside`` holds, else exterior.

    The gradient uses fourth-order centered differences.
    """
    dim = len(axes)
    interp = RegularGridInterpolator(tuple(axes), values, method="linear", bounds_error=False)
    step = fd_step if fd_step is not None else 0.25 * float(axes[0][1] - axes[0][0])

    def value(x: Array) -> Array:
        flat = x.reshape(-1, dim)
        mask = np.asarray(inside(flat), dtype=bool)
        out = np.asarray(exterior(flat), dtype=float).copy()
        if np.any(mask):
            out[mask] = interp(flat[mask])
        return out.reshape(x.shape[:-1])

    sup = max(float(np.max(np.abs(values))), exterior.sup_bound)
    return ScalarField(
        dim=dim,
        func=value,
        grad_func=lambda x: finite_difference_gradient(value, x, step),
        sup_bound=sup,
        name="lattice",
    )


FIELD_FAMILIES: Dict[str, Callable[..., ScalarField]] = {
    "constant": lambda dim, value=0.0: constant_field(value, dim),
    "affine": lambda dim, slope=None, offset=0.0: affine_field(
        slope if slope is not None else [0.0] * dim, offset
    ),
    "paraboloid": paraboloid_field,
    "gaussian": gaussian_field,
    "cosine": lambda dim, wavevector=None, amplitude=1.0: cosine_field(
        wavevector if wavevector is not None else [1.0] + [0.0] * (dim - 1), amplitude
    ),
    "smooth_bump": smooth_bump_field,
    "holder_bump": holder_bump_field,
    "abs_power": abs_power_field,
}


def make_field(family: str, dim: int, **params: object) -> ScalarField:
    """Build a named analytic field.

    Raises:
        NonlocalError: If the family is unknown.
    """
    try:
        builder = FIELD_FAMILIES[family]
    except KeyError:
        raise NonlocalError(f"Unknown field family '{family}'")
    return builder(dim, **params)


# --------------------------------------------------------------------------
# Second difference and the scalar functions of the graph reformulation
# --------------------------------------------------------------------------


def second_difference(u: ScalarField, x: Array, w: Array) -> Array:
    """u(x+w) + u(x-w) - 2u(x)."""
    x = _as_points(x, u.dim)
    w = _as_points(w, u.dim)
    return u(x + w) + u(x - w) - 2.0 * u(x)


def p_weight(t: Array, n: int, s: float) -> Array:
    """(1 + t^2)^{-(n+s)/2}."""
    t = np.asarray(t, dtype=float)
    return (1.0 + t * t) ** (-0.5 * (n + s))


def _check_ns(n: int, s: float) -> None:
    if n < 2:
        raise NonlocalError(f"F requires n >= 2, got {n}")
    if not 0.0 < s < 1.0:
        raise NonlocalError(f"s must lie in (0, 1), got {s}")


def F_primitive(t: float, n: int, s: float, tol: float = 1e-13) -> float:
    """F(t) = integral of p from 0 to t, by adaptive quadrature.

    Raises:
        QuadratureError: If the quadrature error estimate exceeds ``tol``.
    """
    _check_ns(n, s)
    if t == 0.0:
        return 0.0
    if math.isinf(t):
        return math.copysign(F_infinity(n, s), t)
    value, err = integrate.quad(lambda tau: p_weight(tau, n, s), 0.0, abs(t), epsabs=tol, epsrel=tol, limit=200)
    if err > max(tol, tol * abs(value)) * 10:
        raise QuadratureError(f"F({t}) did not converge", best_estimate=value, error_estimate=err)
    return math.copysign(value, t)


@lru_cache(maxsize=64)
def F_infinity(n: int, s: float) -> float:
    """F(+inf) via tau = tan(theta): integral of cos^{n+s-2} over [0, pi/2]."""
    _check_ns(n, s)
    value, err = integrate.quad(lambda th: np.cos(th) ** (n + s - 2.0), 0.0, 0.5 * math.pi, epsabs=1e-14, epsrel=1e-14)
    if err > 1e-11:
        raise QuadratureError("F(inf) did not converge", best_estimate=value, error_estimate=err)
    return float(value)


def F_closed_form(t: Array, n: int, s: float) -> Array:
    """F(t) through the regularized incomplete beta function (vectorized)."""
    t = np.asarray(t, dtype=float)
    b = 0.5 * (n + s - 1.0)
    full = 0.5 * special.beta(0.5, b)
    x = t * t / (1.0 + t * t)
    return np.sign(t) * full * special.betainc(0.5, b, x)


def U_remainder(u: ScalarField, x: Array, w: Array) -> Array:
    """u(x - w) - u(x) + grad u(x) . w.

    Raises:
        MissingGradientError: If ``u`` has no gradient.
    """
    x = _as_points(x, u.dim)
    w = _as_points(w, u.dim)
    g = u.gradient(x)
    return u(x - w) - u(x) + np.sum(g * w, axis=-1)


@dataclass(frozen=True)
class GraphWindow:
    """Cutoffs of radius R: zeta on R^{n-1}, eta(w) = zeta(w') * phi(|w_n|/R) on R^n."""

    R: float

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise NonlocalError(f"Window radius must be positive, got {self.R}")

    def phi(self, t: Array) -> Array:
        return phi(t)

    def zeta(self, w_prime: Array) -> Array:
        w_prime = np.asarray(w_prime, dtype=float)
        return phi(np.linalg.norm(w_prime, axis=-1) / self.R)

    def eta(self, w: Array) -> Array:
        w = np.asarray(w, dtype=float)
        return self.zeta(w[..., :-1]) * phi(np.abs(w[..., -1]) / self.R)


def multi_indices(dim: int, order: int) -> List[MultiIndex]:
    """Distinct multi-indices (counts per coordinate) of the given total order."""
    out = []
    for combo in itertools.combinations_with_replacement(range(dim), order):
        g = [0] * dim
        for a in combo:
            g[a] += 1
        out.append(tuple(g))
    return out
