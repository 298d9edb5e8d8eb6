"""Bayesian latent-Gaussian fuzzy discriminant analysis.

Per-category multivariate regression models are fitted by blockwise Gibbs
sampling to trait data that may be rounded, categorised or missing, and new
observations are classified to sets of categories with a tunable indecision
threshold (``rho``) and an outlier cutoff (``tau``).
"""

from .classify import (ClassifierConfig, FittedModel, classify_argmax, classify_full,
                       classify_set, p_value, posterior_probs, weight_exact, weight_grid,
                       weight_indicator)
from .gibbs import ChainConfig, PosteriorChain, bayes_estimate, fit_all, run_chain
from .model import (MISSING, CategoryParams, CategoryPrior, ClassRule, Continuous,
                    CovarianceClassMap, Dataset, Design, Exact, Interval, Observation,
                    OrderedCategorical, TraitSchema)

__version__ = "0.1.0"

__all__ = [
    "ClassifierConfig", "FittedModel", "classify_argmax", "classify_full", "classify_set",
    "p_value", "posterior_probs", "weight_exact", "weight_grid", "weight_indicator",
    "ChainConfig", "PosteriorChain", "bayes_estimate", "fit_all", "run_chain",
    "MISSING", "CategoryParams", "CategoryPrior", "ClassRule", "Continuous",
    "CovarianceClassMap", "Dataset", "Design", "Exact", "Interval", "Observation",
    "OrderedCategorical", "TraitSchema",
]
