"""Numerical laboratory for probability-flow ODE generation and inversion.

Closed-form mixture targets, bidirectional flow integration with
variational and divergence augmentation, instability metrics of the
generation map, reconstruction-error correlation experiments, and Monte
Carlo verification of the instability probability lower bound.
"""

from .bounds import (
    BoundReport,
    SparsityScanConfig,
    chi_square_tail,
    delta_hat,
    epsilon_hat,
    epsilon_threshold,
    m0_threshold,
    norm_sq_threshold,
    p_m_hat,
    sparsity_scan,
    verify_lower_bound,
)
from .instability import (
    DirectionalCoefficient,
    GridSpec,
    InstabilityReport,
    geometric_average_via_density,
    geometric_average_via_jacobian,
    grid_intrinsic_map,
    gronwall_estimates,
    intrinsic_coefficient,
    point_report,
    realized_coefficient,
    recon_error_bound_term,
    top_singular_direction,
    verify_instability_effect,
)
from .mixture import GaussianMixture, NeighborMixture, TimeMarginal
from .ode import (
    IntegrationError,
    SolverConfig,
    Trajectory,
    generate,
    integrate,
    integrate_with_divergence,
    integrate_with_jacobian,
    invert,
    reconstruct,
)
from .recon import (
    CorrelationRecord,
    CorrelationResult,
    correlation_experiment,
    estimate_point_instability,
    reconstruction_error,
)
from .samplers import pushforward_sampler, uniform_cube_sampler

__version__ = "0.1.0"
