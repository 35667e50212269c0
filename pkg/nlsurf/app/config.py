"""Run configuration: one JSON document per run, validated by pydantic models."""
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from nlsurf.core.engine.fields import (
    FIELD_FAMILIES,
    GraphWindow,
    ScalarField,
    make_field,
    polynomial_field,
    random_polynomial,
)
from nlsurf.core.engine.geometry import (
    Box,
    LatticeSet,
    ball_set,
    box_set,
    halfspace_set,
    subgraph_set,
)
from nlsurf.core.engine.graph import GraphProblem
from nlsurf.core.engine.kernels import KernelSpec, build_kernel
from nlsurf.core.errors import ConfigError
from nlsurf.core.utils import get_settings

logger = logging.getLogger("nlsurf.config")

Command = Literal[
    "perimeter",
    "curvature",
    "identity",
    "decomposition",
    "solve",
    "approx-study",
    "norms",
    "certify-kernel",
    "holder-Ar",
]

# Section each command reads besides the top-level fields.
REQUIRED_SECTIONS: Dict[str, tuple] = {
    "perimeter": ("set", "perimeter"),
    "curvature": ("set", "curvature"),
    "identity": ("graph",),
    "decomposition": ("graph",),
    "solve": ("solver",),
    "approx-study": ("solver",),
    "norms": ("norms",),
    "certify-kernel": (),
    "holder-Ar": ("graph",),
}

EXTRA_FAMILIES = ("polynomial", "random_polynomial")


class Section(BaseModel):
    """Base of every config section: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelDescriptor(Section):
    """Kernel {type, n, sigma, normalization, amplitude, epsilon}."""

    type: Literal["fractional", "perturbed", "over_singular"] = "fractional"
    n: int = Field(ge=1, le=3)
    sigma: float = Field(gt=1.0, lt=2.0)
    normalization: Literal["scaled", "classical"] = "scaled"
    amplitude: float = Field(default=0.1, ge=0.0, lt=1.0)
    epsilon: Optional[float] = Field(default=None, gt=0.0)

    def build(self) -> KernelSpec:
        return build_kernel(self.type, self.n, self.sigma, self.normalization, self.amplitude, self.epsilon)


class FieldDescriptor(Section):
    """Named field family with its keyword parameters."""

    family: str
    dim: int = Field(ge=1, le=3)
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_family(self) -> "FieldDescriptor":
        if self.family not in FIELD_FAMILIES and self.family not in EXTRA_FAMILIES:
            known = ", ".join(sorted([*FIELD_FAMILIES, *EXTRA_FAMILIES]))
            raise ValueError(f"unknown field family '{self.family}' (known: {known})")
        return self

    def build(self) -> ScalarField:
        """Field instance.

        Raises:
            ConfigError: If the parameters do not fit the family.
        """
        params = dict(self.params)
        try:
            if self.family == "random_polynomial":
                rng = np.random.default_rng(int(params.get("seed", 0)))
                return random_polynomial(self.dim, int(params.get("degree", 4)), rng)
            if self.family == "polynomial":
                terms = [(float(c), [int(e) for e in exps]) for c, exps in params["terms"]]
                return polynomial_field(terms, self.dim)
            return make_field(self.family, self.dim, **params)
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(f"Bad parameters for field family '{self.family}': {e}")


def _scaled_field(u: ScalarField, factor: float) -> ScalarField:
    """x' -> factor * u(x' / factor), the graph of the dilated subgraph."""
    grad = None
    if u.has_gradient:
        grad = lambda x: u.gradient(x / factor)  # noqa: E731
    return ScalarField(
        dim=u.dim,
        func=lambda x: factor * u(x / factor),
        grad_func=grad,
        sup_bound=factor * u.sup_bound,
        name=f"{u.name}_x{factor:g}",
    )


class SetDescriptor(Section):
    """Lattice set: ball, halfspace, box or subgraph inside the box [lower, upper]."""

    shape: Literal["ball", "halfspace", "box", "subgraph"]
    lower: List[float]
    upper: List[float]
    h: float = Field(default=0.0625, gt=0.0)
    radius: Optional[float] = Field(default=None, gt=0.0)
    center: Optional[List[float]] = None
    normal: Optional[List[float]] = None
    offset: float = 0.0
    corner_lo: Optional[List[float]] = None
    corner_hi: Optional[List[float]] = None
    graph: Optional[FieldDescriptor] = None

    @model_validator(mode="after")
    def _shape_fields(self) -> "SetDescriptor":
        n = len(self.lower)
        if len(self.upper) != n or not 1 <= n <= 3:
            raise ValueError("lower and upper must have the same length in 1..3")
        if self.shape == "ball" and self.radius is None:
            raise ValueError("a ball needs 'radius'")
        if self.shape == "box" and (self.corner_lo is None or self.corner_hi is None):
            raise ValueError("a box needs 'corner_lo' and 'corner_hi'")
        if self.shape == "subgraph":
            if self.graph is None:
                raise ValueError("a subgraph needs 'graph'")
            if self.graph.dim != n - 1:
                raise ValueError(f"the graph must live on R^{n - 1}")
        for name in ("center", "normal", "corner_lo", "corner_hi"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"'{name}' must have length {n}")
        return self

    @property
    def dim(self) -> int:
        return len(self.lower)

    def build(self, h: Optional[float] = None, scale: float = 1.0) -> LatticeSet:
        """Lattice set on spacing ``h`` after dilating everything by ``scale``."""
        step = h if h is not None else self.h * scale
        lo = [scale * v for v in self.lower]
        hi = [scale * v for v in self.upper]
        if self.shape == "ball":
            center = [scale * v for v in self.center] if self.center is not None else None
            return ball_set(scale * float(self.radius), lo, hi, step, center)
        if self.shape == "halfspace":
            return halfspace_set(lo, hi, step, self.normal, scale * self.offset)
        if self.shape == "box":
            return box_set(
                [scale * v for v in self.corner_lo or []],
                [scale * v for v in self.corner_hi or []],
                lo,
                hi,
                step,
            )
        assert self.graph is not None
        u = self.graph.build()
        return subgraph_set(u if scale == 1.0 else _scaled_field(u, scale), lo, hi, step)


class PerimeterDescriptor(Section):
    """Omega, s, the refinement pair and an optional dilation factor."""

    s: float = Field(gt=0.0, lt=1.0)
    omega_lower: List[float]
    omega_upper: List[float]
    hs: List[float] = Field(min_length=2, max_length=2)
    scale: Optional[float] = Field(default=None, gt=0.0)

    def omega(self) -> Box:
        return Box(tuple(self.omega_lower), tuple(self.omega_upper))


class CurvatureDescriptor(Section):
    """Boundary points, orders s and an optional expected value."""

    s: List[float] = Field(min_length=1)
    points: List[List[float]] = Field(min_length=1)
    expected: Optional[float] = None

    @model_validator(mode="after")
    def _orders(self) -> "CurvatureDescriptor":
        if any(not 0.0 < s < 1.0 for s in self.s):
            raise ValueError("every s must lie in (0, 1)")
        return self


class GraphProblemConfig(Section):
    """Graph field, ambient dimension, order s, window radius R and sample points."""

    field: FieldDescriptor
    n: int = Field(ge=2, le=3)
    s: float = Field(gt=0.0, lt=1.0)
    R: float = Field(default=1.0, gt=0.0)
    beta: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    points: List[List[float]] = Field(default_factory=lambda: [[]])
    expect_solution: bool = False
    levels: List[int] = Field(default_factory=lambda: list(range(3, 11)))
    angular_order: int = Field(default=128, ge=8)

    @model_validator(mode="after")
    def _dims(self) -> "GraphProblemConfig":
        if self.field.dim != self.n - 1:
            raise ValueError(f"the graph field must have dim {self.n - 1}")
        for p in self.points:
            if p and len(p) not in (self.n - 1, self.n):
                raise ValueError(f"points must have length {self.n - 1} or {self.n}")
        return self

    def build(self) -> GraphProblem:
        u = self.field.build()
        beta = self.beta if self.beta is not None else min(u.holder_beta, 1.0)
        return GraphProblem(u=u, s=self.s, window=GraphWindow(self.R), n=self.n, beta=beta)

    def sample_points(self) -> List[List[float]]:
        """Configured points, with an empty entry meaning the origin of R^{n-1}."""
        return [p if p else [0.0] * (self.n - 1) for p in self.points]


class CertifyDescriptor(Section):
    """Certification order k and an optional mollification-rate sweep."""

    k: int = Field(default=1, ge=0, le=4)
    epsilons: List[float] = Field(default_factory=list)
    point: Optional[List[float]] = None
    probe: Optional[FieldDescriptor] = None
    M: float = Field(default=1.0, gt=0.0)
    slope_tol: float = Field(default=0.2, gt=0.0)

    @model_validator(mode="after")
    def _sweep(self) -> "CertifyDescriptor":
        if self.epsilons and (len(self.epsilons) < 2 or self.probe is None):
            raise ValueError("a rate sweep needs at least two epsilons and a 'probe' field")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        return self


class SolverDescriptor(Section):
    """Dirichlet runs: kernel, epsilons, reference field, right side and grids."""

    kernel: KernelDescriptor
    epsilons: List[float] = Field(min_length=1)
    u_star: FieldDescriptor
    rhs: Literal["zero", "manufactured", "gaussian"] = "manufactured"
    hs: List[float] = Field(min_length=1)
    radius: float = Field(default=0.75, gt=0.0)
    box: float = Field(default=1.0, gt=0.0)
    cell_order: int = Field(default=6, ge=2)
    conv_order: int = Field(default=8, ge=2, le=40)
    save_solutions: bool = False

    @model_validator(mode="after")
    def _consistent(self) -> "SolverDescriptor":
        if self.kernel.n not in (1, 2):
            raise ValueError("the solver supports n in {1, 2}")
        if self.kernel.epsilon is not None:
            raise ValueError("set the mollification scales in 'epsilons', not kernel.epsilon")
        if self.u_star.dim != self.kernel.n:
            raise ValueError("u_star must live on the kernel's R^n")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        if self.rhs == "gaussian" and self.u_star.family != "gaussian":
            raise ValueError("rhs 'gaussian' needs u_star of family 'gaussian'")
        if self.rhs == "gaussian" and any(
            float(self.u_star.params.get(k, 1.0)) != 1.0 for k in ("amplitude", "width")
        ):
            raise ValueError("rhs 'gaussian' is exact only for the unit gaussian exp(-|x|^2)")
        if self.rhs == "gaussian" and any(float(c) != 0.0 for c in self.u_star.params.get("center") or []):
            raise ValueError("rhs 'gaussian' is exact only for the unit gaussian exp(-|x|^2)")
        return self


class NormsDescriptor(Section):
    """Covering-inequality sweep over random polynomials."""

    m: int = Field(default=2, ge=0, le=4)
    alpha: float = Field(default=0.5, gt=0.0, le=1.0)
    rho: float = Field(default=1.0, gt=0.0)
    dim: int = Field(default=1, ge=1, le=2)
    count: int = Field(default=20, ge=1)
    degree: int = Field(default=4, ge=0)
    fraction: float = Field(default=0.025, ge=0.01, le=0.05)
    density: float = Field(default=1.0, gt=0.0)
    deltas: List[float] = Field(default_factory=lambda: [0.5, 0.1], min_length=1)


class RunConfig(BaseModel):
    """One run: the command, its sections and the output controls."""

    model_config = ConfigDict(extra="forbid")

    command: Command
    output: Optional[str] = None
    tol: Optional[float] = Field(default=None, gt=0.0)
    seed: int = Field(default_factory=lambda: get_settings().seed)
    threads: int = Field(default_factory=lambda: get_settings().threads, ge=1)
    kernel: Optional[KernelDescriptor] = None
    set: Optional[SetDescriptor] = None
    perimeter: Optional[PerimeterDescriptor] = None
    curvature: Optional[CurvatureDescriptor] = None
    graph: Optional[GraphProblemConfig] = None
    certify: CertifyDescriptor = Field(default_factory=CertifyDescriptor)
    solver: Optional[SolverDescriptor] = None
    norms: Optional[NormsDescriptor] = None

    @model_validator(mode="after")
    def _sections(self) -> "RunConfig":
        missing = [name for name in REQUIRED_SECTIONS[self.command] if getattr(self, name) is None]
        if missing:
            raise ValueError(f"command '{self.command}' needs section(s): {', '.join(missing)}")
        if self.command == "certify-kernel" and self.kernel is None and self.graph is None:
            raise ValueError("command 'certify-kernel' needs a 'kernel' or a 'graph' section")
        return self

    def out_dir(self) -> Path:
        return Path(self.output or get_settings().output_dir)

    def tolerance(self, default: float) -> float:
        return self.tol if self.tol is not None else default


def _key_line(text: str, loc: tuple) -> Optional[int]:
    """Line of the first occurrence of the deepest string key in ``loc``."""
    for key in reversed(loc):
        if isinstance(key, str):
            match = re.search(rf'"{re.escape(key)}"\s*:', text)
            if match:
                return text.count("\n", 0, match.start()) + 1
    return None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate a JSON document.

    Raises:
        ConfigError: With ``source:line`` anchoring for JSON and validation errors.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}", line=e.lineno)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: the document must be a JSON object", line=1)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        line = _key_line(text, loc) or 1
        path = ".".join(str(p) for p in loc) or "<root>"
        raise ConfigError(f"{source}:{line}: {path}: {first['msg']}", line=line)


def load_run_config(path: Path) -> RunConfig:
    """Read and validate a run configuration file.

    Raises:
        ConfigError: If the file is unreadable or invalid.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}")
    cfg = parse_run_config(text, str(path))
    logger.debug(f"Loaded '{cfg.command}' config from {path}")
    return cfg
