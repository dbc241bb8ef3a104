"""Simulation and analysis toolkit for the perturbed Howard drainage network."""

from .rng_field import (
    GaussianFloorLaw,
    GeometricLaw,
    LatticeSite,
    ModelConfig,
    SiteVariates,
    derive_seed,
    law_tail_bound,
    pmf_selfcheck,
    site_variates,
)
from .point_process import (
    BoundaryUnsound,
    ResourceLimit,
    WindowSpec,
    box_counts,
    is_special,
    margin_depths,
    materialize_window,
)
from .network import (
    CoalescenceSample,
    DualVertex,
    JointTrace,
    PathTrace,
    check_noncrossing,
    coalescence_time,
    connectivity_experiment,
    dual_step,
    dual_vertices,
    nearest_next,
    ph_step,
    trace_joint,
    trace_path,
)
from .renewal import (
    ParabolicEnvelope,
    RenewalRecord,
    detect_renewals,
    envelope_contains,
    estimate_sigma_gamma,
    in_event_horizon,
    out_event,
    renewal_increments,
    shield_product_bound,
    z_process,
)
from .analysis import (
    SurvivalCurve,
    TailFit,
    donsker_test,
    eta_statistic,
    hyperuniformity_fit,
    iid_diagnostics,
    survival_estimate,
    symmetry_test,
    tail_exponent,
)

__version__ = "0.1.0"
