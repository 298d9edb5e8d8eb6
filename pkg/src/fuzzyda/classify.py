"""Category weights, posterior probabilities and set-valued classifiers.

A category weight is the posterior-predictive mass that a fitted category
puts on a new observation's cell (a point density when every trait is
exact).  Weights are estimated by averaging over the retained posterior
draws and are handled in log-space throughout: with many traits the
densities underflow long before the probabilities become uninformative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .gibbs import PosteriorChain, bayes_estimate
from .model import (CategoryParams, CovarianceClassMap, Design, Observation, TraitCell,
                    TraitSchema, cells_to_bounds)
from .samplers import cholesky

__all__ = [
    "ChainEvaluator", "Weight", "WeightVector", "UnclassifiableError", "ClassifierConfig",
    "weight_exact", "weight_indicator", "weight_grid", "score_boxes",
    "obfuscated_likelihood_1d", "midpoint_likelihood", "grid_size",
    "posterior_probs", "posterior_probs_log", "reward1", "rho_reward", "expected_reward",
    "classify_argmax", "classify_set", "classify_full", "p_value", "p_values_boxes",
    "reference_scores", "rank_scores", "ReferenceCache",
    "FittedModel", "ClassificationReport",
]

LOG_2PI = math.log(2 * math.pi)
ESTIMATORS = ("auto", "exact", "indicator", "grid", "unilik")
# upper bound on floats held by one batched density evaluation
_CHUNK = 4_000_000


class UnclassifiableError(ArithmeticError):
    """Every category has zero weight (numerically); distinct from an outlier."""


# ---------------------------------------------------------------------------
# Per-draw density machinery
# ---------------------------------------------------------------------------

def _batched_cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return np.stack([cholesky(s) for s in S])


class ChainEvaluator:
    """Evaluates per-draw Gaussian densities of one category's chain.

    Cholesky factors of covariance sub-blocks and conditional-normal
    coefficients are cached per (covariance class, coordinate subset), so
    repeated scoring of observations sharing a pattern is cheap.

    Parameters
    ----------
    chain : retained posterior draws (a single :class:`CategoryParams` is accepted
        and treated as a one-draw chain).
    class_map, design : covariance classes and design; default to a single
        class and main effects of the class map's covariates.
    max_draws : optionally thin the chain to at most this many evenly spaced draws.
    """

    def __init__(self, chain: PosteriorChain | CategoryParams,
                 class_map: CovarianceClassMap | None = None,
                 design: Design | None = None, max_draws: int | None = None):
        if isinstance(chain, CategoryParams):
            chain = PosteriorChain(chain.B[None], chain.Sigmas[None])
        self.chain = chain.subsample(max_draws)
        self.class_map = class_map or CovarianceClassMap.single(())
        self.design = design or Design.main_effects(self.class_map.covariate_names)
        if self.design.p != self.chain.p:
            raise ValueError(f"design has p={self.design.p}, chain has p={self.chain.p}")
        if self.class_map.A != self.chain.A:
            raise ValueError(f"class map has A={self.class_map.A}, chain has A={self.chain.A}")
        self._factors: dict = {}
        self._conds: dict = {}

    @property
    def R(self) -> int:
        return len(self.chain)

    @property
    def q(self) -> int:
        return self.chain.q

    def locate(self, x) -> tuple[int, np.ndarray]:
        """Covariance class and per-draw means (R x q) at raw covariates ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        a = self.class_map(x)
        row = self.design.matrix(x[None])[0]
        return a, np.einsum("k,rkq->rq", row, self.chain.B)

    def factors(self, a: int, J: tuple[int, ...]):
        """Per-draw ``L`` and ``L^{-1}`` of ``Sigma[J, J]`` and half log-determinants."""
        key = (a, J)
        if key not in self._factors:
            idx = np.asarray(J)
            S = self.chain.Sigmas[:, a][:, idx][:, :, idx]
            L = _batched_cholesky(S)
            Linv = np.linalg.inv(L)
            hld = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
            self._factors[key] = (L, Linv, hld)
        return self._factors[key]

    def conditional(self, a: int, K: tuple[int, ...], E: tuple[int, ...]):
        """Per-draw regression ``G`` of ``K`` on ``E`` and Cholesky factor of the residual covariance."""
        key = (a, K, E)
        if key not in self._conds:
            Sig = self.chain.Sigmas[:, a]
            k_idx, e_idx = np.asarray(K), np.asarray(E, dtype=int)
            S_kk = Sig[:, k_idx][:, :, k_idx]
            if len(E):
                S_ke = Sig[:, k_idx][:, :, e_idx]
                _, Linv, _ = self.factors(a, E)
                P = np.swapaxes(Linv, 1, 2) @ Linv  # Sigma_EE^{-1}
                G = S_ke @ P
                C = S_kk - G @ np.swapaxes(S_ke, 1, 2)
            else:
                G = np.zeros((self.R, len(K), 0))
                C = S_kk
            C = 0.5 * (C + np.swapaxes(C, 1, 2))
            self._conds[key] = (G, _batched_cholesky(C))
        return self._conds[key]

    def logpdf(self, a: int, mu: np.ndarray, J: tuple[int, ...], Y: np.ndarray) -> np.ndarray:
        """Log densities of the ``J``-marginal at points ``Y`` (P x |J|) for every draw: (R, P)."""
        Y = np.asarray(Y, dtype=float)
        if not J:
            return np.zeros((self.R, len(Y)))
        Y = Y.reshape(-1, len(J))
        P = len(Y)
        _, Linv, hld = self.factors(a, J)
        LinvT = np.swapaxes(Linv, 1, 2)
        m = mu[:, list(J)]
        const = -hld[:, None] - 0.5 * len(J) * LOG_2PI
        out = np.empty((self.R, P))
        step = max(1, _CHUNK // (self.R * len(J)))
        for s in range(0, P, step):
            diff = Y[None, s:s + step] - m[:, None, :]
            z = diff @ LinvT
            out[:, s:s + step] = -0.5 * np.einsum("rpi,rpi->rp", z, z) + const
        return out


def _as_evaluator(model, class_map=None, design=None) -> ChainEvaluator:
    if isinstance(model, ChainEvaluator):
        return model
    return ChainEvaluator(model, class_map, design)


def _log_ndtr_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``log(Phi(b) - Phi(a))`` for ``a <= b``, stable in both tails."""
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    la, lb = log_ndtr(lo), log_ndtr(hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    return np.where(lb == -np.inf, -np.inf, out)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Weight:
    """One category's weight estimate: log value and relative Monte Carlo SE."""

    log_value: float
    rel_se: float
    tag: str

    @property
    def value(self) -> float:
        return math.exp(self.log_value)

    @property
    def se(self) -> float:
        return self.rel_se * self.value


def _summarise(contrib: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduce per-draw log contributions (R, M) to log means and relative SEs."""
    R = contrib.shape[0]
    logw = logsumexp(contrib, axis=0) - math.log(R)
    if R < 2:
        return logw, np.zeros_like(logw)
    with np.errstate(invalid="ignore", over="ignore"):
        shift = np.where(np.isfinite(logw), logw, 0.0)
        v = np.exp(contrib - shift)
        rel = v.std(axis=0, ddof=1) / math.sqrt(R)
    return logw, np.where(np.isfinite(logw), rel, np.nan)


def grid_size(k: int, T: int | None = None) -> tuple[int, int]:
    """Per-dimension lattice size ``m`` and total ``m**k`` for ``k`` gridded cells.

    The default budget is ``8**k`` capped at 4096 points.
    """
    if k == 0:
        return 1, 1
    T = min(8 ** k, 4096) if T is None else int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    m = max(1, int(round(T ** (1.0 / k))))
    while m > 1 and m ** k > T:
        m -= 1
    while (m + 1) ** k <= T:
        m += 1
    return m, m ** k


def _pattern(lo: np.ndarray, hi: np.ndarray):
    exact = lo == hi
    free = np.isneginf(lo) & np.isposinf(hi)
    bounded = np.isfinite(lo) & np.isfinite(hi) & ~exact
    return exact, free, bounded


def _resolve(method: str, exact, free, bounded) -> str:
    interval = ~(exact | free)
    if method not in ESTIMATORS:
        raise ValueError(f"unknown estimator {method!r}; choose from {ESTIMATORS}")
    if method != "auto":
        return method
    k = int(interval.sum())
    if k == 0:
        return "exact"
    if k == 1:
        return "unilik"
    return "grid" if np.all(bounded[interval]) else "indicator"


def _contrib_exact(ev, a, mu, lo, hi, exact, free, **_):
    if np.any(~exact & ~free):
        raise ValueError("exact estimator needs every cell exact (or missing)")
    E = tuple(np.flatnonzero(exact))
    if np.any(free) and not E:
        return np.zeros((ev.R, len(lo)))
    return ev.logpdf(a, mu, E, lo[:, list(E)])


def _contrib_grid(ev, a, mu, lo, hi, exact, free, bounded, T=None, marginalize_missing=False,
                  **_):
    if np.any(free) and not marginalize_missing:
        raise ValueError("grid estimator refuses missing cells (the box is infinite)")
    K = np.flatnonzero(~exact & ~free)
    if not np.all(bounded[K]):
        raise ValueError("grid estimator needs every obfuscated cell bounded")
    J = np.flatnonzero(~free)
    m, Tn = grid_size(len(K), T)
    u = (np.arange(m) + 0.5) / m
    if len(K):
        U = np.stack(np.meshgrid(*([u] * len(K)), indexing="ij"), axis=-1).reshape(Tn, len(K))
    else:
        U = np.empty((1, 0))
    M = len(lo)
    widths = hi[:, K] - lo[:, K]
    log_vol = np.log(widths).sum(axis=1) - math.log(Tn)
    out = np.empty((ev.R, M))
    kpos = np.searchsorted(J, K)
    step = max(1, _CHUNK // (ev.R * Tn * max(1, len(J))))
    for s in range(0, M, step):
        sl = slice(s, s + step)
        pts = np.repeat(lo[sl][:, J][:, None, :], Tn, axis=1)
        pts[:, :, kpos] = lo[sl][:, None, K] + U[None] * widths[sl][:, None, :]
        dens = ev.logpdf(a, mu, tuple(J), pts.reshape(-1, len(J)))
        out[:, sl] = logsumexp(dens.reshape(ev.R, -1, Tn), axis=2) + log_vol[sl]
    return out


def _contrib_unilik(ev, a, mu, lo, hi, exact, free, **_):
    K = np.flatnonzero(~exact & ~free)
    if len(K) == 0 and np.any(free):
        # the CDF difference over the whole line is 1
        return _contrib_exact(ev, a, mu, lo, hi, exact, free)
    if len(K) != 1:
        raise ValueError("single-coordinate likelihood needs exactly one obfuscated cell")
    k = int(K[0])
    E = tuple(np.flatnonzero(exact))
    logf = ev.logpdf(a, mu, E, lo[:, list(E)])
    G, Lc = ev.conditional(a, (k,), E)
    sd = Lc[:, 0, 0]
    cm = mu[:, k][:, None] + np.einsum("re,rme->rm", G[:, 0, :],
                                       (lo[None][:, :, list(E)] - mu[:, None, list(E)]))
    za = (lo[None, :, k] - cm) / sd[:, None]
    zb = (hi[None, :, k] - cm) / sd[:, None]
    return logf + _log_ndtr_diff(za, zb)


def _contrib_indicator(ev, a, mu, lo, hi, exact, free, rng=None, n_aug=1, **_):
    if rng is None:
        raise ValueError("indicator estimator needs an rng")
    E = tuple(np.flatnonzero(exact))
    K = tuple(np.flatnonzero(~exact))
    M = len(lo)
    logf = ev.logpdf(a, mu, E, lo[:, list(E)])
    if not K:
        return logf
    G, Lc = ev.conditional(a, K, E)
    kk = list(K)
    box = ~free[kk]
    out = np.empty((ev.R, M))
    step = max(1, _CHUNK // (ev.R * n_aug * len(K)))
    for s in range(0, M, step):
        sl = slice(s, s + step)
        cm = mu[:, None, kk] + np.einsum(
            "rke,rme->rmk", G, lo[None, sl][:, :, list(E)] - mu[:, None, list(E)])
        z = rng.standard_normal((ev.R, cm.shape[1], n_aug, len(K)))
        y = cm[:, :, None, :] + z @ np.swapaxes(Lc, 1, 2)[:, None]
        inside = np.all(((y > lo[None, sl, None][..., kk]) & (y <= hi[None, sl, None][..., kk]))
                        | ~box, axis=-1)
        with np.errstate(divide="ignore"):
            out[:, sl] = np.log(inside.mean(axis=2))
    return logf + out


_CONTRIB: dict[str, Callable] = {
    "exact": _contrib_exact, "grid": _contrib_grid,
    "unilik": _contrib_unilik, "indicator": _contrib_indicator,
}


def score_boxes(model, x, lo, hi, method: str = "auto", *, T: int | None = None,
                n_aug: int = 1, rng: np.random.Generator | None = None,
                marginalize_missing: bool = False, class_map=None, design=None):
    """Estimate log weights for many boxes at one covariate value.

    ``lo``/``hi`` are (M, q).  Boxes are grouped by their exact/missing/
    bounded pattern and each group is scored with ``method``.  ``"auto"``
    integrates missing coordinates out analytically and then picks the plain
    density (nothing obfuscated), the univariate CDF form (one obfuscated
    coordinate), the grid (all obfuscated cells bounded) or the indicator
    estimator (otherwise).

    Returns
    -------
    log_w, rel_se : (M,) arrays
    tags : list of the estimator used per box
    """
    ev = _as_evaluator(model, class_map, design)
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.shape[1] != ev.q:
        raise ValueError(f"boxes must be (M, {ev.q})")
    if np.any(lo > hi):
        raise ValueError("box with lo > hi")
    a, mu = ev.locate(x)
    exact, free, bounded = _pattern(lo, hi)
    keys = np.concatenate([exact, free, bounded], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    log_w = np.empty(len(lo))
    rel = np.empty(len(lo))
    tags: list[str] = [""] * len(lo)
    q = ev.q
    auto = method == "auto"
    for g, key in enumerate(uniq):
        rows = np.flatnonzero(inv == g)
        ex, fr, bd = key[:q], key[q:2 * q], key[2 * q:]
        tag = _resolve(method, ex, fr, bd)
        contrib = _CONTRIB[tag](ev, a, mu, lo[rows], hi[rows], ex, fr, bounded=bd, T=T,
                                n_aug=n_aug, rng=rng,
                                marginalize_missing=marginalize_missing or auto)
        lw, rs = _summarise(contrib)
        log_w[rows] = lw
        rel[rows] = rs
        for r in rows:
            tags[r] = tag
    return log_w, rel, tags


def _cells_bounds(cells) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(cells, tuple) and len(cells) == 2 and isinstance(cells[0], np.ndarray):
        return np.asarray(cells[0], float), np.asarray(cells[1], float)
    return cells_to_bounds(cells)


def _single(model, x, cells, method, class_map, design, **kw) -> Weight:
    lo, hi = _cells_bounds(cells)
    lw, rs, tags = score_boxes(model, x, lo[None], hi[None], method,
                               class_map=class_map, design=design, **kw)
    return Weight(float(lw[0]), float(rs[0]), tags[0])


def weight_exact(model, x, y, class_map=None, design=None) -> Weight:
    """Posterior-mean density of a fully exact trait vector ``y``."""
    y = np.asarray(y, dtype=float)
    return _single(model, x, (y, y.copy()), "exact", class_map, design)


def weight_indicator(model, x, cells, rng: np.random.Generator, n_aug: int = 1,
                     class_map=None, design=None) -> Weight:
    """Marginal density of the exact coordinates times the fraction of
    augmented values of the other coordinates that land in their cells.

    The augmented values are drawn per retained draw from the normal of the
    obfuscated coordinates given the exact ones only, not truncated to the
    cells.
    """
    return _single(model, x, cells, "indicator", class_map, design, rng=rng, n_aug=n_aug)


def weight_grid(model, x, cells, T: int | None = None, class_map=None, design=None,
                marginalize_missing: bool = False) -> Weight:
    """Midpoint-lattice integral of the posterior density over the obfuscated cells."""
    return _single(model, x, cells, "grid", class_map, design, T=T,
                   marginalize_missing=marginalize_missing)


def obfuscated_likelihood_1d(theta: CategoryParams, x, y_minus_k, k: int, c: float, d: float,
                             class_map=None, design=None) -> float:
    """Density of the exact coordinates times ``P(c < Y_k <= d | Y_{-k})`` under ``theta``."""
    ev = ChainEvaluator(theta, class_map, design)
    y_minus_k = np.asarray(y_minus_k, dtype=float)
    lo = np.insert(y_minus_k, k, c)
    hi = np.insert(y_minus_k, k, d)
    if not c < d:
        raise ValueError("need c < d")
    lw, _, _ = score_boxes(ev, x, lo[None], hi[None], "unilik")
    return float(np.exp(lw[0]))


def midpoint_likelihood(theta: CategoryParams, x, cells: Sequence[TraitCell],
                        class_map=None, design=None) -> float:
    """Cell volume times the density at the cell's centre point."""
    ev = ChainEvaluator(theta, class_map, design)
    lo, hi = _cells_bounds(cells)
    exact = lo == hi
    if not np.all(np.isfinite(lo) & np.isfinite(hi)):
        raise ValueError("midpoint likelihood needs every cell bounded")
    z = np.where(exact, lo, 0.5 * (lo + hi))
    a, mu = ev.locate(x)
    logf = ev.logpdf(a, mu, tuple(range(ev.q)), z[None])[0, 0]
    return float(np.exp(logf + np.log(hi[~exact] - lo[~exact]).sum()))


@dataclass(frozen=True)
class WeightVector:
    """Weights of all categories for one observation (log-space)."""

    log_omega: np.ndarray
    rel_se: np.ndarray
    tags: tuple[str, ...]

    @property
    def omega(self) -> np.ndarray:
        """Weights rescaled by a shared factor so the largest is 1."""
        finite = np.isfinite(self.log_omega)
        if not finite.any():
            return np.zeros_like(self.log_omega)
        return np.exp(self.log_omega - self.log_omega[finite].max())


# ---------------------------------------------------------------------------
# Probabilities, rewards and classifiers
# ---------------------------------------------------------------------------

def _active_mask(N: int, active) -> np.ndarray:
    if active is None:
        return np.ones(N, dtype=bool)
    mask = np.zeros(N, dtype=bool)
    mask[list(active)] = True
    if not mask.any():
        raise ValueError("active subset is empty")
    return mask


def posterior_probs_log(log_pi, log_omega, active=None) -> np.ndarray:
    """Posterior category probabilities from log priors and log weights.

    Categories outside ``active`` get probability 0 and the rest are
    renormalised.  Raises :class:`UnclassifiableError` when every active
    numerator is zero.
    """
    log_pi = np.asarray(log_pi, dtype=float)
    log_omega = np.asarray(log_omega, dtype=float)
    num = log_pi + log_omega
    mask = _active_mask(len(num), active)
    num = np.where(mask, num, -np.inf)
    if not np.any(np.isfinite(num)):
        raise UnclassifiableError("all category weights are zero; increase R or check the input")
    p = np.exp(num - num.max())
    return p / p.sum()


def posterior_probs(pi, omega, active=None) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if np.any(pi < 0) or np.any(omega < 0):
        raise ValueError("priors and weights must be non-negative")
    with np.errstate(divide="ignore"):
        return posterior_probs_log(np.log(pi), np.log(omega), active)


def reward1(candidate, i: int) -> float:
    """``1/|I|`` if the true category ``i`` is in ``candidate``, else 0."""
    candidate = set(candidate)
    return 1.0 / len(candidate) if i in candidate else 0.0


def rho_reward(rho: float) -> Callable[[Sequence[int], int, np.ndarray], float]:
    """Reward ``1{i in I} - rho * p_max * #(I without the top category)``.

    The returned callable takes ``(candidate, i, p)`` since the penalty
    depends on the largest posterior probability.
    """
    def reward(candidate, i: int, p: np.ndarray) -> float:
        top = classify_argmax(p)
        candidate = set(candidate)
        extra = len(candidate) - (top in candidate)
        return float(i in candidate) - rho * extra * float(np.max(p))
    return reward


def expected_reward(reward: Callable, candidate, p) -> float:
    """``sum_i R(candidate, i) p_i``; ``reward`` is ``reward1`` or a :func:`rho_reward`."""
    p = np.asarray(p, dtype=float)
    if reward is reward1:
        return float(sum(reward1(candidate, i) * p[i] for i in range(len(p))))
    return float(sum(reward(candidate, i, p) * p[i] for i in range(len(p))))


def classify_argmax(p) -> int:
    """Most probable category; ties go to the lowest index."""
    return int(np.argmax(np.asarray(p, dtype=float)))


def classify_set(p, rho: float, active=None) -> tuple[int, ...]:
    """Categories whose probability is at least ``rho`` times the largest."""
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    p = np.asarray(p, dtype=float)
    mask = _active_mask(len(p), active)
    pmax = p[mask].max()
    return tuple(int(i) for i in np.flatnonzero(mask & (p >= rho * pmax)))


def classify_full(p, omega_bar, pi, rho: float, tau: float, active=None) -> tuple[int, ...]:
    """The rho-set restricted to categories with ``pi_i * omega_bar_i >= tau``.

    An empty result flags the observation as an outlier.
    """
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    chosen = classify_set(p, rho, active)
    if tau == 0:
        return chosen
    pi = np.asarray(pi, dtype=float)
    omega_bar = np.asarray(omega_bar, dtype=float)
    return tuple(i for i in chosen if pi[i] * omega_bar[i] >= tau)


# ---------------------------------------------------------------------------
# Multivariate p-value
# ---------------------------------------------------------------------------

class ReferenceCache:
    """Sorted reference scores keyed by (category, covariates, pattern, estimator)."""

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, scores: np.ndarray) -> None:
        self._store[key] = scores


def reference_boxes(ev: ChainEvaluator, x, lo, hi, schema: TraitSchema, n_ref: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-predictive boxes with the same exact/missing pattern as ``(lo, hi)``."""
    a, mu = ev.locate(x)
    L, _, _ = ev.factors(a, tuple(range(ev.q)))
    r = rng.integers(ev.R, size=n_ref)
    z = rng.standard_normal((n_ref, ev.q))
    y = mu[r] + np.einsum("nij,nj->ni", L[r], z)
    return schema.obfuscate(y, like_lo=lo, like_hi=hi)


def _reference_key(x, lo, hi, method, T, n_ref):
    exact, free, _ = _pattern(lo, hi)
    with np.errstate(invalid="ignore"):
        widths = np.where(exact | free | ~np.isfinite(hi - lo), 0.0, hi - lo)
    return (tuple(np.asarray(x, float).reshape(-1)), exact.tobytes(), free.tobytes(),
            method, T, n_ref, tuple(np.round(widths, 12)))


def reference_scores(ev: ChainEvaluator, x, lo, hi, schema: TraitSchema,
                     rng: np.random.Generator, n_ref: int = 4000, method: str = "auto",
                     T: int | None = None, n_aug: int = 1,
                     cache: ReferenceCache | None = None, cache_key=None) -> np.ndarray:
    """Sorted log weights of ``n_ref`` reference observations sharing the pattern of ``(lo, hi)``."""
    if n_ref < 1:
        raise ValueError("n_ref must be >= 1")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    key = (cache_key,) + _reference_key(x, lo, hi, method, T, n_ref)
    if cache is not None:
        ref = cache.get(key)
        if ref is not None:
            return ref
    rlo, rhi = reference_boxes(ev, x, lo, hi, schema, n_ref, rng)
    both = np.concatenate([rlo, rhi], axis=1)
    uniq, inv = np.unique(both, axis=0, return_inverse=True)
    s, _, _ = score_boxes(ev, x, uniq[:, :ev.q], uniq[:, ev.q:], method, T=T, n_aug=n_aug,
                          rng=rng)
    ref = np.sort(s[inv.reshape(-1)])
    if cache is not None:
        cache.put(key, ref)
    return ref


def rank_scores(ref: np.ndarray, scores) -> np.ndarray:
    """Fraction of sorted reference scores that are no larger than each score."""
    scores = np.asarray(scores, dtype=float)
    # boxes scored in different batches may differ in the last bits
    bumped = np.where(np.isfinite(scores), scores + 1e-9 * np.maximum(1.0, np.abs(scores)),
                      scores)
    return np.searchsorted(ref, bumped, side="right") / len(ref)


def p_value(model, x, cells, schema: TraitSchema, rng: np.random.Generator, n_ref: int = 4000,
            method: str = "auto", T: int | None = None, n_aug: int = 1,
            cache: ReferenceCache | None = None, cache_key=None,
            class_map=None, design=None) -> float:
    """Monte Carlo estimate of the probability that a posterior-predictive
    observation with the same pattern scores a weight no larger than ``cells``.

    Reference observations are generated by drawing a retained parameter,
    a latent trait vector at ``x`` and passing it through the schema's
    obfuscation; exact and missing coordinates of ``cells`` stay exact and
    missing.  Observation and references are scored by the same estimator
    on the same chain.
    """
    ev = _as_evaluator(model, class_map, design)
    lo, hi = _cells_bounds(cells)
    ref = reference_scores(ev, x, lo, hi, schema, rng, n_ref, method, T, n_aug, cache,
                           cache_key)
    s0, _, _ = score_boxes(ev, x, lo[None], hi[None], method, T=T, n_aug=n_aug, rng=rng)
    return float(rank_scores(ref, s0)[0])


def p_values_boxes(ev: ChainEvaluator, x, lo, hi, log_w, schema: TraitSchema,
                   rng: np.random.Generator, n_ref: int = 4000, method: str = "auto",
                   T: int | None = None, n_aug: int = 1, cache: ReferenceCache | None = None,
                   cache_key=None) -> np.ndarray:
    """p-values for many boxes (M, q) whose log weights ``log_w`` are already known.

    Boxes sharing a reference pattern share one reference sample.
    """
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    cache = cache if cache is not None else ReferenceCache()
    groups: dict = {}
    for j in range(len(lo)):
        groups.setdefault(_reference_key(x, lo[j], hi[j], method, T, n_ref), []).append(j)
    out = np.empty(len(lo))
    for rows in groups.values():
        ref = reference_scores(ev, x, lo[rows[0]], hi[rows[0]], schema, rng, n_ref, method, T,
                               n_aug, cache, cache_key)
        out[rows] = rank_scores(ref, np.asarray(log_w)[rows])
    return out


# ---------------------------------------------------------------------------
# Fitted model wrapper
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    rho: float = 0.1
    tau: float = 0.001
    pi: tuple[float, ...] | None = None
    active: tuple[int, ...] | None = None
    estimator: str = "auto"
    T: int | None = None
    n_aug: int = 1
    n_ref: int = 4000
    max_draws: int | None = None

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.active is not None and len(self.active) == 0:
            raise ValueError("active subset must be non-empty")
        if self.n_ref < 1 or self.n_aug < 1:
            raise ValueError("n_ref and n_aug must be >= 1")


@dataclass(frozen=True)
class ClassificationReport:
    p_hat: np.ndarray
    log_omega: np.ndarray
    rel_se: np.ndarray
    omega_bar: np.ndarray | None
    chosen: tuple[int, ...]
    tags: tuple[str, ...]

    @property
    def outlier(self) -> bool:
        return len(self.chosen) == 0

    def to_record(self, categories: Sequence[str]) -> dict:
        def num(v):
            return float(f"{v:.6g}")
        rec = {
            "p_hat": {c: num(p) for c, p in zip(categories, self.p_hat)},
            "log_omega": {c: (num(w) if np.isfinite(w) else None)
                          for c, w in zip(categories, self.log_omega)},
            "omega_rel_se": {c: (num(s) if np.isfinite(s) else None)
                             for c, s in zip(categories, self.rel_se)},
            "omega_bar": (None if self.omega_bar is None
                          else {c: num(w) for c, w in zip(categories, self.omega_bar)}),
            "chosen": [categories[i] for i in self.chosen],
            "outlier": self.outlier,
            "estimator": list(self.tags),
        }
        return rec


@dataclass
class FittedModel:
    """Everything needed to classify: schema, covariates, design and one chain per category."""

    schema: TraitSchema
    class_map: CovarianceClassMap
    design: Design
    categories: tuple[str, ...]
    chains: list
    pi: np.ndarray
    _evaluators: dict = field(default_factory=dict, repr=False)
    _refs: ReferenceCache = field(default_factory=ReferenceCache, repr=False)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.pi = np.asarray(self.pi, dtype=float)
        if len(self.chains) != len(self.categories) or len(self.pi) != len(self.categories):
            raise ValueError("need one chain and one prior probability per category")

    @property
    def N(self) -> int:
        return len(self.categories)

    def evaluator(self, i: int, max_draws: int | None = None) -> ChainEvaluator:
        key = (i, max_draws)
        if key not in self._evaluators:
            self._evaluators[key] = ChainEvaluator(self.chains[i], self.class_map, self.design,
                                                   max_draws)
        return self._evaluators[key]

    def plug_in(self) -> "FittedModel":
        """The same model with every chain replaced by its Bayes estimate."""
        chains = [PosteriorChain.from_params([bayes_estimate(c)]) for c in self.chains]
        return FittedModel(self.schema, self.class_map, self.design, self.categories, chains,
                           self.pi)

    def prior(self, config: ClassifierConfig) -> np.ndarray:
        pi = self.pi if config.pi is None else np.asarray(config.pi, dtype=float)
        mask = _active_mask(self.N, config.active)
        pi = np.where(mask, pi, 0.0)
        if pi.sum() <= 0:
            raise ValueError("prior puts no mass on the active categories")
        return pi / pi.sum()

    def weights(self, x, lo, hi, config: ClassifierConfig,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, list]:
        """Log weights (N, M) and relative SEs for boxes ``lo``/``hi`` (M, q) at ``x``."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        mask = _active_mask(self.N, config.active)
        logw = np.full((self.N, len(lo)), -np.inf)
        rel = np.full((self.N, len(lo)), np.nan)
        tags = [[""] * len(lo) for _ in range(self.N)]
        for i in np.flatnonzero(mask):
            logw[i], rel[i], tags[i] = score_boxes(
                self.evaluator(i, config.max_draws), x, lo, hi, config.estimator,
                T=config.T, n_aug=config.n_aug, rng=rng)
        return logw, rel, tags

    def p_values(self, x, lo, hi, config: ClassifierConfig, rng: np.random.Generator,
                 categories=None) -> np.ndarray:
        mask = _active_mask(self.N, config.active)
        out = np.zeros(self.N)
        for i in (np.flatnonzero(mask) if categories is None else categories):
            out[i] = p_value(self.evaluator(i, config.max_draws), x, (lo, hi), self.schema, rng,
                             config.n_ref, config.estimator, config.T, config.n_aug,
                             cache=self._refs, cache_key=(i, config.max_draws))
        return out

    def classify(self, obs: Observation | tuple, config: ClassifierConfig,
                 rng: np.random.Generator) -> ClassificationReport:
        """Classify one observation (an :class:`Observation` or ``(x, lo, hi)``)."""
        if isinstance(obs, Observation):
            x = obs.covariates
            lo, hi = obs.bounds()
        else:
            x, lo, hi = obs
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (self.schema.q,):
            raise ValueError(f"observation has {lo.shape[0]} traits, model has {self.schema.q}")
        pi = self.prior(config)
        logw, rel, tags = self.weights(x, lo[None], hi[None], config, rng)
        with np.errstate(divide="ignore"):
            p = posterior_probs_log(np.log(pi), logw[:, 0], config.active)
        active = np.flatnonzero(pi > 0)
        chosen = classify_set(p, config.rho, active)
        omega_bar = None
        if config.tau > 0:
            # p-values only matter for categories that survive the rho rule
            omega_bar = self.p_values(x, lo, hi, config, rng, categories=chosen)
            chosen = classify_full(p, omega_bar, pi, config.rho, config.tau, active)
        return ClassificationReport(p, logw[:, 0], rel[:, 0], omega_bar, chosen,
                                    tuple(t[0] for t in tags))
