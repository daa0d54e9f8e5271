from .bases import BasisColumn, PolyBasis, xz_basis
from .builders import build_product_spec
from .logit import (
    MnlModel,
    MnlProbability,
    MnlResidual,
    UtilitySpec,
    choice_probabilities,
    marginal_effects,
    mnl_loglik,
    mnl_mle,
)
from .regression import (
    NlrResidual,
    PolynomialRegression,
    ProbitRegression,
    RationalFractionRegression,
    RegressionFunction,
)

__all__ = [
    "BasisColumn",
    "PolyBasis",
    "xz_basis",
    "build_product_spec",
    "MnlModel",
    "MnlProbability",
    "MnlResidual",
    "UtilitySpec",
    "choice_probabilities",
    "marginal_effects",
    "mnl_loglik",
    "mnl_mle",
    "NlrResidual",
    "PolynomialRegression",
    "ProbitRegression",
    "RationalFractionRegression",
    "RegressionFunction",
]
