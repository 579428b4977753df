"""Adaptive geostatistical sampling for household vector-control campaigns."""

__version__ = "0.1.0"

from .design import (  # noqa: F401
    DesignConfig,
    DesignState,
    TerminationReport,
    check_termination,
    run_adaptive,
    run_random,
    schedule_t,
    select_batch,
    utility_scores,
)
from .inference import (  # noqa: F401
    FitConfig,
    LatentState,
    ModelVariant,
    PosteriorDraws,
    PosteriorFit,
    PredictiveDraws,
    compute_dic,
    fit_at_fixed_hypers,
    hpdi,
    laplace_fit,
    log_marginal_likelihood,
    predict_unvisited,
    sample_posterior,
)
from .priors import (  # noqa: F401
    HyperParams,
    MaternParams,
    PriorConfig,
    build_cov_matrix,
    log_prior,
    matern_cov,
    matern_correlation,
)
from .simulate import (  # noqa: F401
    ExperimentConfig,
    GeneratorConfig,
    generate_village,
    run_experiment,
    summarize,
)
from .village import (  # noqa: F401
    CovariateSchema,
    CovariateSet,
    HouseRecord,
    HouseStatus,
    VillageFrame,
    build_frame,
    derive_density,
    derive_distance_to_perimeter,
    load_village,
    standardize,
)
