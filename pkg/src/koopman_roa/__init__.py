"""Data-driven regions of attraction via a spectral Koopman surrogate.

The package fits a linear operator on a truncated orthogonal-polynomial
dictionary from snapshot pairs, extracts its spectrum, locates fixed points
of the induced flow map, and separates basins of attraction with level sets
of unit-eigenvalue eigenfunctions through the saddle points.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .basis import (
    BasisSpec,
    MultiIndexSet,
    eval_basis,
    eval_basis_batch,
    eval_univariate,
    injective_positions,
    invert_injective,
    invert_injective_batch,
    quasi_norm,
    truncated_indices,
)
from .dynamics import (
    OdeModel,
    SimulationError,
    SnapshotPairs,
    TrajectoryDataset,
    competition_model,
    competition_rhs,
    endpoint_clusters,
    load_trajectories_csv,
    mak_model,
    mak_rhs,
    rk4_step,
    sample_initial_conditions,
    save_trajectories_csv,
    simulate,
    split,
    to_snapshots,
)
from .edmd import (
    ErrorReport,
    FitError,
    KoopmanModel,
    MomentMatrices,
    SweepRow,
    accumulate_moments,
    empirical_error,
    eval_eigenfunctions,
    fit,
    fit_from_moments,
    fit_with_residual,
    flow,
    flow_path,
    load_model,
    merge_moments,
    pq_sweep,
    predict_observables,
    save_model,
)
from .pipeline import (
    PipelineConfig,
    PipelineError,
    PipelineReport,
    analyze_model,
    prepare_balanced,
    run_pipeline,
    save_boundary_csv,
    save_labels_csv,
)
from .roa import (
    BoundaryGrid,
    FixedPointReport,
    RoaError,
    SaddleClassifier,
    UnitaryCandidate,
    UnitaryEigenfunction,
    boundary_grid,
    build_classifier,
    classify_points,
    classify_stability,
    combine_near_unit,
    construct_unitary,
    default_starts,
    eval_unitary,
    fill_stability,
    find_fixed_points,
    local_jacobian,
    residual_objective,
    select_unitary_candidates,
)

__all__ = [name for name in dir() if not name.startswith("_")]
