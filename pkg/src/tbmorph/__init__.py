"""Transport-based morphometry.

A variational optimal-mass-transport solver for 2D/3D density grids, the
linear transport-space embedding with its generative inverse, and cohort
statistics (regression, discrimination, PCA) in that space, validated
against closed-form and linear-programming oracles.
"""

from .calculus import (
    JacobianField,
    VectorField,
    adjugate,
    curl,
    curl_curl,
    determinant,
    divergence,
    gradient,
    identity_map,
    interp,
    jacobian,
    pushforward_residual,
    sample_cubic,
)
from .lot import (
    LotEmbedding,
    Template,
    analyze,
    build_template,
    embedding_from_map,
    map_from_embedding,
    read_embedding,
    sample_direction,
    synthesize,
    write_embedding,
)
from .oracles import (
    Phantom,
    fd_objective_check,
    gaussian_bump,
    kantorovich_lp,
    make_phantom_cohort,
    omt_1d,
    random_smooth_density,
    random_smooth_pair,
)
from .solver import (
    NesterovState,
    SolveResult,
    SolverConfig,
    SolveTrace,
    el_gradient,
    enforce_diffeomorphism,
    extrapolate,
    nesterov_step,
    objective,
    rel_mse,
    solve,
    transport_cost,
)
from .stats import (
    Cohort,
    DirectionResult,
    PcaModel,
    Reduction,
    alpha_stability_scan,
    cohort_from_embeddings,
    correlation_direction,
    pca,
    permutation_test,
    plda,
    reduce,
)
from .volume import (
    DEFAULT_FLOOR,
    DEFAULT_TARGET_MASS,
    DensityVolume,
    GridSpec,
    normalize_density,
    read_nifti1,
    read_volume,
    resample,
    write_volume,
)

__version__ = "0.1.0"
