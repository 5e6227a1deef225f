"""Gaussian sum filtering for linear systems with Gaussian-mixture noise.

A bank of mode-matched Kalman filters tracks the mixture posterior; a
pluggable reduction scheme collapses it back to one Gaussian per step.
Included reductions: moment-matched merge, heaviest-member remove, the
truth-label matched oracle, and an active-cluster selection scheme driven
by a cheap initial state estimate (five estimator variants). A benchmark
harness and CLI reproduce the synthetic mixture-noise tracking studies.
"""

from .errors import (
    DegenerateCovariance,
    DegenerateInnovation,
    GsfError,
    MissingGains,
    MissingTruth,
    NoConvergence,
)
from .gaussians import (
    Gaussian,
    GaussianMixture,
    KlEstimate,
    kl_mc,
    log_density,
    mixture_log_density,
    mixture_sample,
    moment_match,
    normalize_log_weights,
    sample,
)
from .state_space import (
    MEAS_TICK,
    SystemModel,
    TimeGrid,
    Trajectory,
    constant_grid,
    rw_velocity_model,
    simulate,
)
from .kalman import (
    GainSchedule,
    KalmanState,
    gains_from_csv,
    gains_to_csv,
    kf_step,
    kf_step_with_gain,
    precompute_gains,
    steady_state_gain,
)
from .bank import (
    ModelIndex,
    PosteriorEntry,
    PosteriorMixture,
    gsf_step,
    innovation_params,
    posterior_as_mixture,
)
from .reduction import (
    INIT_ESTIMATORS,
    ReducedPosterior,
    ReductionScheme,
    initial_estimate,
    reduce_matched,
    reduce_merge,
    reduce_posterior,
    reduce_proposed,
    reduce_remove,
    scheme_from_string,
    select_active,
)
from .bench import (
    DEFAULT_METHODS,
    MetricsReport,
    SyntheticModelSpec,
    build_schedules,
    build_table1,
    build_table2_scenario,
    calibrate_c,
    cep,
    filter_trajectory,
    resolve_methods,
    rmse,
    run_mc,
    table2_mixtures,
)

__version__ = "0.1.0"
