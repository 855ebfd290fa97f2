"""Uncertainty-aware implicit shape reconstruction.

A latent-conditioned multi-surface signed-distance network (the shape atlas)
plus Bayesian latent inference: MAP estimation, Laplace approximation, HMC
and NUTS sampling, calibration/coverage diagnostics, and the geometry needed
to evaluate them (isosurfacing, mesh distances, certainty maps) on an
analytic ellipsoid-shell test family.
"""

from .network import (
    ShapeNetwork,
    NumericalError,
    init_network,
    forward,
    forward_batch,
    backprop,
    backprop_batch,
    lipschitz_penalty,
    normalize_lipschitz,
    save_model,
    load_model,
)
from .atlas import (
    TrainingShape,
    LatentTable,
    TrainConfig,
    training_loss,
    train_atlas,
    fit_prior,
    save_training_set,
    load_training_set,
)
from .geometry import (
    TriMesh,
    PointObservation,
    VoxelGrid,
    mesh_sdf,
    mesh_sdf_batch,
    sample_surface_points,
    perturb_along_normals,
    marching_cubes,
    extract_zero_level,
    chamfer,
    hausdorff,
    certainty_map,
    icosphere,
    save_obj,
    load_obj,
)
from .synthetic import (
    EllipsoidShape,
    EllipsoidFamilyParams,
    default_family_params,
    generate_family,
    analytic_sdf,
    analytic_sdf_batch,
)
from .posterior import (
    PosteriorSpec,
    HMCConfig,
    Chain,
    neg_log_posterior,
    map_estimate,
    laplace_approx,
    LaplaceApproximation,
    leapfrog,
    hmc_sample,
    nuts_sample,
    joint_noise_sample,
    sample_chains,
    mmse,
)
from .diagnostics import (
    NodeDistribution,
    CalibrationReport,
    empirical_quantile,
    achieved_coverage,
    ece,
    ess,
    chain_ess,
    node_stats,
)

__version__ = "0.1.0"
