"""Small synthetic models and datasets shared by the test modules."""

import numpy as np

from fuzzyda.classify import FittedModel
from fuzzyda.gibbs import PosteriorChain
from fuzzyda.model import (CategoryParams, Continuous, CovarianceClassMap, Dataset, Design,
                           TraitSchema)


def point_model(params, schema, class_map=None, design=None, categories=None, pi=None):
    """A fitted model whose chains are single parameter values."""
    class_map = class_map or CovarianceClassMap.single(())
    design = design or Design.main_effects(class_map.covariate_names)
    chains = [PosteriorChain.from_params([t]) for t in params]
    N = len(params)
    categories = categories or tuple(f"c{i}" for i in range(N))
    pi = np.full(N, 1.0 / N) if pi is None else pi
    return FittedModel(schema, class_map, design, categories, chains, pi)


def gaussian_pair(d, half_width=0.0, sd=1.0):
    """Two one-trait categories N(0, sd^2) and N(d, sd^2) without covariates."""
    schema = TraitSchema(("y",), (Continuous(half_width),))
    params = [CategoryParams(np.array([[0.0]]), np.array([[sd * sd]])),
              CategoryParams(np.array([[float(d)]]), np.array([[sd * sd]]))]
    return point_model(params, schema)


def make_dataset(rng, means, n_per, sd=1.0, half_width=0.0, names=None, covariate=False):
    """Labelled data with category means ``means`` (N x q) and spherical noise.

    With ``covariate=True`` a binary covariate ``age`` is attached (it has no effect).
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    N, q = means.shape
    names = names or tuple(f"t{k}" for k in range(q))
    schema = TraitSchema(tuple(names), tuple(Continuous(half_width) for _ in range(q)))
    labels = np.repeat(np.arange(N), n_per)
    y = means[labels] + sd * rng.normal(size=(len(labels), q))
    lo, hi = schema.obfuscate(y)
    cov_names = ("age",) if covariate else ()
    cov = rng.integers(0, 2, (len(labels), 1)) if covariate else np.empty((len(labels), 0))
    cmap = CovarianceClassMap.single(cov_names)
    return Dataset(schema, cov_names, cmap, tuple(f"c{i}" for i in range(N)), cov, lo, hi,
                   labels)
