"""Homogenized densities and thin-film limits for manifold-valued energies."""

__version__ = "0.1.0"

from .geometry import (  # noqa: E402
    AffinePlane,
    AmbiguousProjection,
    NotOnManifold,
    Sphere,
    TangentFrame,
    Torus,
    manifold_from_dict,
    matrix_tangent_projection,
    nearest_point,
    tangent_frame,
)
from .integrand import (  # noqa: E402
    Checkerboard2D,
    Constant,
    GridSampled,
    IntegrandSpec,
    Laminate1D,
    PerturbedIntegrand,
    eval_f,
    eval_fbar,
    integrand_from_dict,
)
from .discretization import (  # noqa: E402
    DiscreteField,
    SlabDomain,
    assemble_energy,
    assemble_gradient,
    refine_field,
    seed_field,
)
from .cell import (  # noqa: E402
    CellProblem,
    CellSolution,
    DensityTable,
    build_density_table,
    check_constrained_penalized_equality,
    estimate_hom_density,
    solve_cell,
)
from .film import (  # noqa: E402
    FilmProblem,
    PlanarField,
    RecoveryParams,
    build_recovery_sequence,
    eval_film_energy,
    eval_limit_energy,
    minimize_film,
    minimize_limit,
)
from .verify import (  # noqa: E402
    GammaReport,
    PropertyReport,
    run_gamma_experiment,
    verify_lipschitz_growth,
    verify_quasiconvexity,
    verify_rank_one,
)
