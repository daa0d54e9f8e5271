"""merm: errors-in-variables robust moment conditions and GMM estimation.

Any moment function g(x, s, theta) is mechanically turned into a corrected
moment function that is robust to additive measurement error in x; the
correction coefficients are estimated jointly with theta by GMM, with
standard sandwich inference and specification tests.
"""

from .corrected import (
    build_affine_nonclassical_problem,
    build_second_measurement_moments,
    corrected_moment,
)
from .dataset import DataError, Dataset, read_csv
from .effects import (
    AverageEffect,
    BiasBoundReport,
    DeltaMethodResult,
    EffectSpec,
    average_effect_corrected,
    bias_bound,
    delta_method,
    rank_diagnostics,
)
from .gamma import (
    CorrectionScheme,
    ErrorMomentSet,
    GammaVector,
    SchemeError,
    VFamily,
    exponential_v_family,
    gamma_from_moments,
    gamma_multivariate,
    gaussian_moments,
    moments_from_gamma,
)
from .gmm import (
    EstimationError,
    EstimationResult,
    EstimatorConfig,
    JTest,
    ParameterVector,
    Problem,
    RankError,
    WeightingPolicy,
    estimate,
    gmm_objective,
    j_test,
    jacobian_psi,
    profile_gamma,
    sandwich_variance,
    weighting_matrix,
)
from .moments import (
    AnalyticProvider,
    DerivativeRequest,
    MomentError,
    MomentSpec,
    MultiIndex,
    NumericProvider,
    build_instrument_basis,
    derivative_x,
    evaluate_moments,
    multi_index_set,
)
from .simulation import (
    EstimatorSpec,
    McDesign,
    McResult,
    emit_table,
    generate_dgp,
    make_design,
    naive_estimator,
    read_mc_csv,
    run_replications,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticProvider",
    "AverageEffect",
    "BiasBoundReport",
    "CorrectionScheme",
    "DataError",
    "Dataset",
    "DeltaMethodResult",
    "DerivativeRequest",
    "EffectSpec",
    "ErrorMomentSet",
    "EstimationError",
    "EstimationResult",
    "EstimatorConfig",
    "EstimatorSpec",
    "GammaVector",
    "JTest",
    "McDesign",
    "McResult",
    "MomentError",
    "MomentSpec",
    "MultiIndex",
    "NumericProvider",
    "ParameterVector",
    "Problem",
    "RankError",
    "SchemeError",
    "VFamily",
    "WeightingPolicy",
    "average_effect_corrected",
    "bias_bound",
    "build_affine_nonclassical_problem",
    "build_instrument_basis",
    "build_second_measurement_moments",
    "corrected_moment",
    "delta_method",
    "derivative_x",
    "emit_table",
    "estimate",
    "evaluate_moments",
    "exponential_v_family",
    "gamma_from_moments",
    "gamma_multivariate",
    "gaussian_moments",
    "generate_dgp",
    "gmm_objective",
    "j_test",
    "jacobian_psi",
    "make_design",
    "moments_from_gamma",
    "multi_index_set",
    "naive_estimator",
    "profile_gamma",
    "rank_diagnostics",
    "read_csv",
    "read_mc_csv",
    "run_replications",
    "sandwich_variance",
    "weighting_matrix",
]
