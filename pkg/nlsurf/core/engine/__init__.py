"""Computation engine: fields, kernels, singular quadrature, geometry, graphs, norms and the solver."""
from nlsurf.core.engine.fields import (
    F_closed_form,
    F_infinity,
    F_primitive,
    GraphWindow,
    ScalarField,
    U_remainder,
    make_field,
    p_weight,
    random_polynomial,
    second_difference,
    smooth_step,
)
from nlsurf.core.engine.geometry import (
    Box,
    ExteriorRule,
    GeometryConfig,
    LatticeSet,
    ball_curvature,
    fractional_perimeter,
    interaction_energy,
    interval_interaction,
    load_lattice,
    nonlocal_mean_curvature,
    perimeter_refinement,
    save_lattice,
    windowed_curvature,
)
from nlsurf.core.engine.graph import (
    GraphProblem,
    check_decomposition,
    check_graph_identity,
    coefficient_a,
    far_field_psi,
    graph_curvature,
    graph_kernel_spec,
    holder_exponent_Ar,
    kernel_KR,
    remainder_Ar,
)
from nlsurf.core.engine.holder import (
    HolderReport,
    covering_inequality_check,
    grid_cover,
    interpolation_constant,
    scaled_holder_norm,
)
from nlsurf.core.engine.kernels import (
    KernelSpec,
    MollifierConfig,
    build_kernel,
    make_fractional_kernel,
    mollify_kernel,
    verify_structural_bounds,
)
from nlsurf.core.engine.operators import (
    QuadratureConfig,
    apply_operator,
    gaussian_operator_value,
    operator_deviation,
    polar_oracle,
)
from nlsurf.core.engine.reports import CheckRow, Report
from nlsurf.core.engine.solver import (
    ApproximationBase,
    DirichletProblem,
    approximation_study,
    mollify_rhs,
    save_lattice_field,
    solve_dirichlet,
)

__all__ = [
    "ApproximationBase",
    "Box",
    "CheckRow",
    "DirichletProblem",
    "ExteriorRule",
    "F_closed_form",
    "F_infinity",
    "F_primitive",
    "GeometryConfig",
    "GraphProblem",
    "GraphWindow",
    "HolderReport",
    "KernelSpec",
    "LatticeSet",
    "MollifierConfig",
    "QuadratureConfig",
    "Report",
    "ScalarField",
    "U_remainder",
    "apply_operator",
    "approximation_study",
    "ball_curvature",
    "build_kernel",
    "check_decomposition",
    "check_graph_identity",
    "coefficient_a",
    "covering_inequality_check",
    "far_field_psi",
    "fractional_perimeter",
    "gaussian_operator_value",
    "graph_curvature",
    "graph_kernel_spec",
    "grid_cover",
    "holder_exponent_Ar",
    "interaction_energy",
    "interpolation_constant",
    "interval_interaction",
    "kernel_KR",
    "load_lattice",
    "make_field",
    "make_fractional_kernel",
    "mollify_kernel",
    "mollify_rhs",
    "nonlocal_mean_curvature",
    "operator_deviation",
    "p_weight",
    "perimeter_refinement",
    "polar_oracle",
    "random_polynomial",
    "remainder_Ar",
    "save_lattice",
    "save_lattice_field",
    "scaled_holder_norm",
    "second_difference",
    "smooth_step",
    "solve_dirichlet",
    "verify_structural_bounds",
    "windowed_curvature",
]
