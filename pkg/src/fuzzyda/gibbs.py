"""Blockwise Gibbs sampler for per-category heteroscedastic multivariate regression.

Each category is fitted independently.  One iteration imputes the latent
trait values of obfuscated observations from truncated normals, draws the
regression coefficients from their Gaussian full conditional and then each
covariance class from its inverse-Wishart full conditional.
"""

from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .model import (CategoryParams, CategoryPrior, CovarianceClassMap, Dataset, Design,
                    Observation, unvec, vec)
from .samplers import (SamplerError, TruncatedMVNSampler, cholesky, rng_stream,
                       sample_inverse_wishart)

__all__ = [
    "ChainConfig", "PosteriorChain", "kronecker_contraction", "conditional_beta_posterior",
    "conditional_sigma_posterior", "impute_traits", "run_chain", "fit_category",
    "fit_all", "bayes_estimate", "quantile_intervals", "save_chains", "load_chains",
    "CHAIN_FORMAT_VERSION",
]

CHAIN_FORMAT_VERSION = 1
_MAGIC = b"FUZZYDA-CHAINS\n"


@dataclass(frozen=True)
class ChainConfig:
    """Gibbs run settings.

    ``fixed_sigmas`` switches on a test mode in which the covariance
    matrices are held at the given values and never updated; it exists so
    the coefficient draws can be checked against their closed form and is
    not meant for real fits.
    """

    iterations: int = 4000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    retain_imputed: bool = False
    max_proposals: int = 1000
    gibbs_sweeps: int = 10
    fixed_sigmas: tuple | None = None

    def __post_init__(self):
        if self.iterations < 1 or self.burn_in < 0 or self.thin < 1:
            raise ValueError("need iterations >= 1, burn_in >= 0 and thin >= 1")
        if self.retained < 1:
            raise ValueError(f"no draws retained: iterations={self.iterations}, "
                             f"burn_in={self.burn_in}, thin={self.thin}")

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.fixed_sigmas is not None:
            d["fixed_sigmas"] = np.asarray(self.fixed_sigmas).tolist()
        return d


@dataclass
class PosteriorChain:
    """Retained draws of one category: ``B`` (R, p+1, q) and ``Sigmas`` (R, A, q, q)."""

    B: np.ndarray
    Sigmas: np.ndarray
    config: dict = field(default_factory=dict)
    imputed: np.ndarray | None = None

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.Sigmas = np.asarray(self.Sigmas, dtype=float)
        if self.B.ndim != 3 or self.Sigmas.ndim != 4 or len(self.B) != len(self.Sigmas):
            raise ValueError("B must be (R, p+1, q) and Sigmas (R, A, q, q) with equal R")

    def __len__(self) -> int:
        return len(self.B)

    def __getitem__(self, r: int) -> CategoryParams:
        return CategoryParams(self.B[r], self.Sigmas[r])

    @property
    def q(self) -> int:
        return self.B.shape[2]

    @property
    def p(self) -> int:
        return self.B.shape[1] - 1

    @property
    def A(self) -> int:
        return self.Sigmas.shape[1]

    @classmethod
    def from_params(cls, params: Sequence[CategoryParams], config: dict | None = None):
        return cls(np.stack([t.B for t in params]), np.stack([t.Sigmas for t in params]),
                   dict(config or {}))

    def subsample(self, max_draws: int | None) -> "PosteriorChain":
        """Evenly spaced subset of at most ``max_draws`` draws (deterministic)."""
        if max_draws is None or len(self) <= max_draws:
            return self
        idx = np.linspace(0, len(self) - 1, max_draws).round().astype(int)
        return PosteriorChain(self.B[idx], self.Sigmas[idx], self.config)


# ---------------------------------------------------------------------------
# Full conditionals
# ---------------------------------------------------------------------------

def kronecker_contraction(X: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """``Z^T (Sigma (x) I_n)^{-1} Z`` for ``Z = I_q (x) X``, computed as ``Sigma^{-1} (x) X^T X``."""
    X = np.asarray(X, dtype=float)
    Sinv = linalg.cho_solve(linalg.cho_factor(Sigma, lower=True), np.eye(len(Sigma)))
    return np.kron(0.5 * (Sinv + Sinv.T), X.T @ X)


def _precision_and_shift(Sinvs, XtXs, XtYs, prior_prec_blocks, prior_shift):
    prec = prior_prec_blocks.copy()
    shift = prior_shift.copy()
    for Sinv, XtX, XtY in zip(Sinvs, XtXs, XtYs):
        prec += np.kron(Sinv, XtX)
        # ((Sigma^-1 (x) X^T) vec(Y) = vec(X^T Y Sigma^-1)
        shift += vec(XtY @ Sinv)
    return prec, shift


def conditional_beta_posterior(Sigmas: Sequence[np.ndarray], Xs: Sequence[np.ndarray],
                               Us: Sequence[np.ndarray], prior: CategoryPrior):
    """Mean and covariance of vec(B) given the covariances and complete traits.

    ``Xs[a]`` is the design matrix of class ``a`` and ``Us[a]`` its
    column-stacked trait matrix.  No ``n q x n q`` Kronecker product is formed.
    """
    q, k = prior.q, prior.p + 1
    SBinv = np.linalg.inv(prior.SigmaB)
    prior_prec = np.kron(np.eye(q), 0.5 * (SBinv + SBinv.T))
    prior_shift = prior_prec @ prior.beta0
    Sinvs, XtXs, XtYs = [], [], []
    for S, X, U in zip(Sigmas, Xs, Us):
        X = np.asarray(X, dtype=float).reshape(-1, k)
        if len(X) == 0:
            continue
        Y = unvec(np.asarray(U, dtype=float), len(X), q)
        Sinv = np.linalg.inv(S)
        Sinvs.append(0.5 * (Sinv + Sinv.T))
        XtXs.append(X.T @ X)
        XtYs.append(X.T @ Y)
    prec, shift = _precision_and_shift(Sinvs, XtXs, XtYs, prior_prec, prior_shift)
    cf = linalg.cho_factor(prec, lower=True)
    Sigma_tilde = linalg.cho_solve(cf, np.eye(len(prec)))
    beta_tilde = linalg.cho_solve(cf, shift)
    return beta_tilde, 0.5 * (Sigma_tilde + Sigma_tilde.T)


def conditional_sigma_posterior(B: np.ndarray, Y: np.ndarray, X: np.ndarray,
                                prior: CategoryPrior) -> tuple[float, np.ndarray]:
    """Inverse-Wishart parameters of one covariance class given B and its traits."""
    Y = np.asarray(Y, dtype=float).reshape(-1, prior.q)
    X = np.asarray(X, dtype=float).reshape(-1, prior.p + 1)
    E = Y - X @ B
    V = prior.V0 + E.T @ E
    return prior.nu0 + len(Y), 0.5 * (V + V.T)


def impute_traits(theta: CategoryParams, obs: Observation, class_map: CovarianceClassMap,
                  rng: np.random.Generator, design: Design | None = None,
                  sampler: TruncatedMVNSampler | None = None) -> np.ndarray:
    """Draw a complete trait vector for ``obs`` inside its cells under ``theta``."""
    design = design or Design.main_effects(class_map.covariate_names)
    x = design.matrix(np.asarray(obs.covariates)[None])[0]
    a = class_map(obs.covariates)
    lo, hi = obs.bounds()
    sampler = sampler or TruncatedMVNSampler()
    return sampler.sample(theta.mean(x)[None], theta.Sigmas[a], lo[None], hi[None], rng)[0]


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------

def _pattern_groups(lo: np.ndarray, hi: np.ndarray, classes: np.ndarray):
    """Rows needing imputation, grouped by (class, exact mask, missing mask)."""
    exact = lo == hi
    free = np.isneginf(lo) & np.isposinf(hi)
    groups: dict[tuple, list[int]] = {}
    for j in np.flatnonzero(~exact.all(axis=1)):
        key = (int(classes[j]), exact[j].tobytes(), free[j].tobytes())
        groups.setdefault(key, []).append(j)
    return [(key[0], np.asarray(rows)) for key, rows in sorted(groups.items())]


def _initial_traits(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    bounded = np.isfinite(lo) & np.isfinite(hi)
    y = np.where(bounded, 0.5 * (np.where(bounded, lo, 0.0) + np.where(bounded, hi, 0.0)), 0.0)
    y = np.where(np.isneginf(lo) & np.isfinite(hi), hi - 0.5, y)
    y = np.where(np.isfinite(lo) & np.isposinf(hi), lo + 0.5, y)
    return y


def run_chain(X: np.ndarray, classes: np.ndarray, lo: np.ndarray, hi: np.ndarray,
              prior: CategoryPrior, A: int, config: ChainConfig,
              rng: np.random.Generator | None = None) -> PosteriorChain:
    """Run the blockwise Gibbs sampler for one category.

    Parameters
    ----------
    X : (n, p+1) design matrix with intercept column.
    classes : (n,) covariance-class index of every row.
    lo, hi : (n, q) cell bounds of the observed traits.
    prior : the category's prior.
    A : number of covariance classes.
    config : chain settings; ``rng`` defaults to ``rng_stream(config.seed)``.
    """
    rng = rng if rng is not None else rng_stream(config.seed)
    X = np.asarray(X, dtype=float).reshape(-1, prior.p + 1)
    lo = np.asarray(lo, dtype=float).reshape(-1, prior.q)
    hi = np.asarray(hi, dtype=float).reshape(-1, prior.q)
    classes = np.asarray(classes, dtype=np.intp)
    n, q, k = len(X), prior.q, prior.p + 1

    rows_by_class = [np.flatnonzero(classes == a) for a in range(A)]
    for a, rows in enumerate(rows_by_class):
        if 0 < len(rows) < q:
            warnings.warn(f"covariance class {a} has {len(rows)} observations for {q} traits; "
                          "its covariance is driven mostly by the prior", stacklevel=2)
    XtXs = [X[r].T @ X[r] for r in rows_by_class]
    occupied = [a for a in range(A) if len(rows_by_class[a])]
    groups = _pattern_groups(lo, hi, classes)
    sampler = TruncatedMVNSampler(config.max_proposals, config.gibbs_sweeps)

    SBinv = np.linalg.inv(prior.SigmaB)
    prior_prec = np.kron(np.eye(q), 0.5 * (SBinv + SBinv.T))
    beta0 = prior.beta0
    prior_shift = prior_prec @ beta0
    prior_L = np.kron(np.eye(q), cholesky(prior.SigmaB))

    fixed = config.fixed_sigmas is not None
    if fixed:
        Sig = np.array(config.fixed_sigmas, dtype=float).reshape(A, q, q)
    else:
        Sig = np.stack([sample_inverse_wishart(prior.nu0, prior.V0, rng) for _ in range(A)])
    beta = beta0 + prior_L @ rng.standard_normal(k * q)
    B = unvec(beta, k, q)
    Y = _initial_traits(lo, hi)

    R = config.retained
    out_B = np.empty((R, k, q))
    out_S = np.empty((R, A, q, q))
    out_Y = np.empty((R, n, q)) if config.retain_imputed else None
    keep = 0
    for it in range(1, config.iterations + 1):
        try:
            for a, rows in groups:
                Y[rows] = sampler.sample(X[rows] @ B, Sig[a], lo[rows], hi[rows], rng,
                                         init=Y[rows])
            if occupied:
                Sinvs = []
                for a in occupied:
                    Sinv = np.linalg.inv(Sig[a])
                    Sinvs.append(0.5 * (Sinv + Sinv.T))
                XtYs = [X[rows_by_class[a]].T @ Y[rows_by_class[a]] for a in occupied]
                prec, shift = _precision_and_shift(Sinvs, [XtXs[a] for a in occupied], XtYs,
                                                   prior_prec, prior_shift)
                L = cholesky(prec)
                mean = linalg.cho_solve((L, True), shift, check_finite=False)
                beta = mean + linalg.solve_triangular(L.T, rng.standard_normal(k * q),
                                                      lower=False, check_finite=False)
            else:
                beta = beta0 + prior_L @ rng.standard_normal(k * q)
            B = unvec(beta, k, q)
            if not fixed:
                for a, rows in enumerate(rows_by_class):
                    E = Y[rows] - X[rows] @ B
                    V = prior.V0 + E.T @ E
                    Sig[a] = sample_inverse_wishart(prior.nu0 + len(rows), 0.5 * (V + V.T), rng)
        except (SamplerError, np.linalg.LinAlgError, ValueError) as exc:
            raise SamplerError(f"Gibbs iteration {it}: {exc}") from exc
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0 and keep < R:
            out_B[keep] = B
            out_S[keep] = Sig
            if out_Y is not None:
                out_Y[keep] = Y
            keep += 1
    return PosteriorChain(out_B, out_S, config.to_dict(), out_Y)


def fit_category(dataset: Dataset, i: int, prior: CategoryPrior, config: ChainConfig,
                 design: Design | None = None) -> PosteriorChain:
    """Fit category ``i``; its stream is ``(config.seed, i)``."""
    design = design or Design.main_effects(dataset.covariate_names)
    rows = dataset.category_rows(i)
    X = design.matrix(dataset.covariates[rows])
    classes = dataset.class_map.classes(dataset.covariates[rows])
    if len(rows) == 0:
        warnings.warn(f"category {dataset.categories[i]!r} has no observations; "
                      "its chain samples the prior", stacklevel=2)
    return run_chain(X, classes, dataset.lo[rows], dataset.hi[rows], prior,
                     dataset.class_map.A, config, rng_stream(config.seed, i))


def _fit_job(args):
    return fit_category(*args)


def fit_all(dataset: Dataset, priors: Sequence[CategoryPrior], config: ChainConfig,
            design: Design | None = None, workers: int = 1) -> list[PosteriorChain]:
    """Fit every category; results are identical for any ``workers``."""
    jobs = [(dataset, i, priors[i], config, design) for i in range(dataset.N)]
    if workers <= 1 or len(jobs) <= 1:
        return [_fit_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_job, jobs))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def bayes_estimate(chain: PosteriorChain) -> CategoryParams:
    if len(chain) == 0:
        raise ValueError("empty chain")
    S = chain.Sigmas.mean(axis=0)
    return CategoryParams(chain.B.mean(axis=0), 0.5 * (S + np.swapaxes(S, -1, -2)))


def quantile_intervals(chain: PosteriorChain, probs: Sequence[float] = (0.025, 0.5, 0.975),
                       row_names: Sequence[str] | None = None,
                       trait_names: Sequence[str] | None = None,
                       class_names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Empirical quantiles (linear interpolation) of every scalar parameter.

    Keys look like ``B[age,wing]`` and ``Sigma[juv][wing,notch]``; covariance
    entries are listed for the upper triangle only.
    """
    if len(chain) == 0:
        raise ValueError("empty chain")
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    rows = list(row_names or [str(m) for m in range(chain.p + 1)])
    traits = list(trait_names or [str(k) for k in range(chain.q)])
    classes = list(class_names or [str(a) for a in range(chain.A)])
    out: dict[str, np.ndarray] = {}
    qB = np.quantile(chain.B, probs, axis=0, method="linear")
    for m in range(chain.p + 1):
        for k in range(chain.q):
            out[f"B[{rows[m]},{traits[k]}]"] = qB[:, m, k]
    qS = np.quantile(chain.Sigmas, probs, axis=0, method="linear")
    for a in range(chain.A):
        for k in range(chain.q):
            for l in range(k, chain.q):
                out[f"Sigma[{classes[a]}][{traits[k]},{traits[l]}]"] = qS[:, a, k, l]
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_chains(path, chains: Sequence[PosteriorChain], meta: dict | None = None) -> None:
    """Write chains to a versioned binary file.

    Layout: the magic line ``FUZZYDA-CHAINS\\n``, a little-endian uint32 format
    version, a uint64 header length, a UTF-8 JSON header (sorted keys) with
    ``q, p, A, N, draws`` and free-form ``meta``, then for each category its
    ``B`` draws (R, p+1, q) followed by its ``Sigmas`` draws (R, A, q, q) as
    C-ordered little-endian float64.
    """
    chains = list(chains)
    if not chains:
        raise ValueError("nothing to save")
    q, p, A = chains[0].q, chains[0].p, chains[0].A
    for c in chains:
        if (c.q, c.p, c.A) != (q, p, A):
            raise ValueError("all chains must share q, p and A")
    header = {
        "format_version": CHAIN_FORMAT_VERSION,
        "q": q, "p": p, "A": A, "N": len(chains),
        "draws": [len(c) for c in chains],
        "configs": [c.config for c in chains],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", CHAIN_FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chains:
            fh.write(np.ascontiguousarray(c.B, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(c.Sigmas, dtype="<f8").tobytes())


def load_chains(path) -> tuple[list[PosteriorChain], dict]:
    """Inverse of :func:`save_chains`; returns ``(chains, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a chain file")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != CHAIN_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported chain format version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    q, p, A = header["q"], header["p"], header["A"]
    chains = []
    for R, cfg in zip(header["draws"], header["configs"]):
        nb = R * (p + 1) * q
        ns = R * A * q * q
        B = np.frombuffer(data, "<f8", nb, off).reshape(R, p + 1, q).astype(float)
        off += 8 * nb
        S = np.frombuffer(data, "<f8", ns, off).reshape(R, A, q, q).astype(float)
        off += 8 * ns
        chains.append(PosteriorChain(B, S, cfg))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return chains, header["meta"]
