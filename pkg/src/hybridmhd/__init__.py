"""Hybridized and embedded-hybridized DG solvers for planar stationary MHD."""

from .basis import QuadratureRule, ReferenceElement, build_reference_element, quadrature_rule
from .global_system import (
    FieldState,
    SingularSystemError,
    SparseSystem,
    assemble_global,
    boundary_trace_mismatch,
    divergence_inf,
    normal_jump_inf,
    post_normalize_pressure,
    solve_condensed,
    solve_monolithic,
)
from .local_solver import (
    CondensedBlock,
    ConvectiveFields,
    LocalMatrices,
    PhysParams,
    PrescribedFields,
    assemble_local,
    condense,
    eliminate_auxiliary,
    eval_numerical_flux,
    reconstruct_local,
)
from .mesh import (
    AffineMap,
    GeometryError,
    Mesh,
    affine_map,
    gen_lshape,
    gen_strip,
    gen_structured_square,
    read_mesh,
    uniform_refine,
    write_mesh,
)
from .picard import PicardConfig, PicardHistory, StabilizationError, solve_linear, solve_nonlinear
from .spaces import (
    DofLayout,
    Variant,
    boundary_dof_values,
    build_dof_layout,
    count_global_dofs,
)
from .verify import (
    ErrorReport,
    ManufacturedCase,
    case_hartmann,
    case_singular2d,
    case_smooth2d,
    convergence_rates,
    convergence_study,
    error_norms,
    run_case,
)

__all__ = [name for name in dir() if not name.startswith("_")]
