"""Random draws: multivariate normal, inverse Wishart and (truncated) normals.

Every sampler takes an explicit :class:`numpy.random.Generator`; use
:func:`rng_stream` to derive independent, reproducible streams from one
master seed.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

__all__ = [
    "SamplerError", "rng_stream", "cholesky", "sample_mvn", "sample_inverse_wishart",
    "truncnorm_univariate", "truncnorm_std", "sample_truncated_mvn", "TruncatedMVNSampler",
]

TAIL_CUTOFF = 5.0
JITTER = 1e-10


class SamplerError(RuntimeError):
    """A draw could not be produced (non-SPD covariance, empty box, ...)."""


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``.

    Streams are children of one :class:`numpy.random.SeedSequence`, so
    category chains or simulation batches seeded from the same master seed
    never overlap.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(stream) & 0xFFFFFFFFFFFFFFFF,))
    return np.random.Generator(np.random.PCG64(ss))


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a single bounded jitter retry."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[-1]
    scale = np.mean(np.diagonal(cov, axis1=-2, axis2=-1), axis=-1)
    bump = JITTER * np.maximum(scale, np.finfo(float).tiny)
    try:
        return np.linalg.cholesky(cov + np.asarray(bump)[..., None, None] * np.eye(d))
    except np.linalg.LinAlgError:
        raise SamplerError("covariance matrix is not positive definite (after jitter)") from None


def sample_mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator,
               size: int | None = None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    L = cholesky(cov)
    if size is None:
        return mean + L @ rng.standard_normal(mean.shape[-1])
    return mean + rng.standard_normal((size, mean.shape[-1])) @ L.T


def sample_inverse_wishart(nu: float, V: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW(nu, V), parametrised so that ``E[X] = V / (nu - q - 1)``.

    Bartlett construction: with ``V = C C^T`` and ``A`` the Bartlett factor
    of a standard Wishart(nu, I), ``X = C A^{-T} A^{-1} C^T``.
    """
    V = np.asarray(V, dtype=float)
    q = V.shape[0]
    if not nu > q - 1:
        raise ValueError(f"inverse Wishart needs nu > q - 1 = {q - 1}, got {nu}")
    C = cholesky(V)
    A = np.zeros((q, q))
    A[np.diag_indices(q)] = np.sqrt(rng.chisquare(nu - np.arange(q)))
    A[np.tril_indices(q, -1)] = rng.standard_normal(q * (q - 1) // 2)
    # X = W^T W with W = A^{-1} C^T
    W = linalg.solve_triangular(A, C.T, lower=True, check_finite=False)
    X = W.T @ W
    return 0.5 * (X + X.T)


# ---------------------------------------------------------------------------
# Univariate truncated normal
# ---------------------------------------------------------------------------

def _tail_draw(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal truncated to (a, b] with a > 0 far in the tail.

    Exponential proposals (Robert, 1995) when the interval is wide compared
    to the tail scale 1/a; uniform proposals otherwise.
    """
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        aa, bb = a[pending], b[pending]
        lam = 0.5 * (aa + np.sqrt(aa * aa + 4.0))
        narrow = (bb - aa) < 1.0 / aa
        z = np.where(narrow,
                     aa + (bb - aa) * rng.random(aa.size),
                     aa + rng.exponential(1.0, aa.size) / lam)
        u = rng.random(aa.size)
        log_acc = np.where(narrow, -0.5 * (z * z - aa * aa), -0.5 * (z - lam) ** 2)
        ok = (np.log(u) <= log_acc) & (z <= bb) & (z > aa)
        out[pending[ok]] = z[ok]
        pending = pending[~ok]
    return out


def truncnorm_std(a, b, rng: np.random.Generator) -> np.ndarray:
    """Vectorised standard normal draws truncated to ``(a, b]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim == 0:
        a, b = np.broadcast_arrays(np.atleast_1d(a), np.atleast_1d(b))
    # also rejects NaN bounds
    if not np.all(a < b):
        raise SamplerError("truncation bounds must satisfy a < b")
    # invert on the side of zero with the better-conditioned CDF, mirroring
    # intervals that lie mostly above zero
    right = a >= 0
    lo = np.where(right, -b, a)
    hi = np.where(right, -a, b)
    clo = ndtr(lo)
    u = rng.random(a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(right, -1.0, 1.0) * ndtri(clo + u * (ndtr(hi) - clo))

    upper_tail = a > TAIL_CUTOFF
    lower_tail = b < -TAIL_CUTOFF
    if upper_tail.any():
        out[upper_tail] = _tail_draw(a[upper_tail], b[upper_tail], rng)
    if lower_tail.any():
        out[lower_tail] = -_tail_draw(-b[lower_tail], -a[lower_tail], rng)
    # guard the half-open bounds against rounding
    return np.minimum(np.maximum(out, np.nextafter(a, np.inf)), b)


def truncnorm_univariate(mu: float, sigma: float, c: float, d: float,
                         rng: np.random.Generator) -> float:
    """One draw from N(mu, sigma^2) conditioned on (c, d]."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not c < d:
        raise ValueError("need c < d")
    z = truncnorm_std((c - mu) / sigma, (d - mu) / sigma, rng)[0]
    y = mu + sigma * z
    return float(min(max(y, math.nextafter(c, math.inf)), d))


# ---------------------------------------------------------------------------
# Truncated multivariate normal on boxes
# ---------------------------------------------------------------------------

def _conditional(mean: np.ndarray, cov: np.ndarray, keep: np.ndarray, given: np.ndarray,
                 values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean rows (n x |keep|) and shared covariance of ``keep`` given ``given = values``."""
    if given.size == 0:
        return mean[:, keep], cov[np.ix_(keep, keep)]
    S_kg = cov[np.ix_(keep, given)]
    S_gg = cov[np.ix_(given, given)]
    G = linalg.cho_solve(linalg.cho_factor(S_gg, lower=True), S_kg.T).T
    m = mean[:, keep] + (values - mean[:, given]) @ G.T
    c = cov[np.ix_(keep, keep)] - G @ S_kg.T
    return m, 0.5 * (c + c.T)


class TruncatedMVNSampler:
    """Batched sampler for N(mean_j, cov) restricted to boxes ``(lo_j, hi_j]``.

    Exact coordinates (``lo == hi``) are conditioned on.  Coordinates with at
    least one finite bound are drawn by batched rejection from their
    conditional normal; after ``max_proposals`` failures the remaining rows
    fall back to ``gibbs_sweeps`` coordinate-wise sweeps of exact univariate
    truncated normals.  Missing coordinates are finally drawn from their
    conditional normal given everything else.
    """

    def __init__(self, max_proposals: int = 1000, gibbs_sweeps: int = 10, batch: int = 32):
        if max_proposals < 0 or gibbs_sweeps < 1 or batch < 1:
            raise ValueError("max_proposals >= 0, gibbs_sweeps >= 1 and batch >= 1 required")
        self.max_proposals = max_proposals
        self.gibbs_sweeps = gibbs_sweeps
        self.batch = batch
        # rows that exhausted the rejection budget, for diagnostics
        self.fallbacks = 0

    def sample(self, mean: np.ndarray, cov: np.ndarray, lo: np.ndarray, hi: np.ndarray,
               rng: np.random.Generator, init: np.ndarray | None = None) -> np.ndarray:
        """Draw one vector per row.  All rows must share the same exact/missing pattern."""
        mean = np.atleast_2d(np.asarray(mean, dtype=float))
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        n, q = lo.shape
        mean = np.broadcast_to(mean, (n, q))
        exact = lo[0] == hi[0]
        free = np.isneginf(lo[0]) & np.isposinf(hi[0])
        box = ~(exact | free)
        if np.any((lo == hi) != exact) or np.any((np.isneginf(lo) & np.isposinf(hi)) != free):
            raise ValueError("rows of one batch must share the exact/missing pattern")

        y = np.empty((n, q))
        E = np.flatnonzero(exact)
        C = np.flatnonzero(box)
        F = np.flatnonzero(free)
        y[:, E] = lo[:, E]
        if C.size:
            m, S = _conditional(mean, cov, C, E, y[:, E])
            y[:, C] = self._box(m, S, lo[:, C], hi[:, C], rng,
                                None if init is None else np.atleast_2d(init)[:, C])
        if F.size:
            given = np.concatenate([E, C])
            m, S = _conditional(mean, cov, F, given, y[:, given])
            y[:, F] = m + rng.standard_normal((n, F.size)) @ cholesky(S).T
        return y

    def _box(self, m, S, lo, hi, rng, init):
        n, k = m.shape
        if k == 1:
            sd = math.sqrt(S[0, 0])
            z = truncnorm_std((lo[:, 0] - m[:, 0]) / sd, (hi[:, 0] - m[:, 0]) / sd, rng)
            return np.clip((m[:, 0] + sd * z)[:, None], np.nextafter(lo, np.inf), hi)
        # Propose the coordinate with the smallest marginal box mass from its
        # truncated marginal and the rest from the conditional normal; the
        # target/proposal ratio is then an indicator, so acceptance stays exact.
        sd = np.sqrt(np.diag(S))
        mass = ndtr((hi - m) / sd) - ndtr((lo - m) / sd)
        j = int(np.argmin(mass.mean(axis=0)))
        o = np.arange(k) != j
        g = S[o, j] / S[j, j]
        Lc = cholesky(S[np.ix_(o, o)] - np.outer(g, S[j, o]))
        out = np.empty((n, k))
        pending = np.arange(n)
        tried = 0
        b = self.batch
        while pending.size and tried < self.max_proposals:
            # batches double so hard boxes cost few rounds
            b = min(b, self.max_proposals - tried)
            mp = m[pending]
            aj = np.repeat(((lo[pending, j] - mp[:, j]) / sd[j])[:, None], b, axis=1)
            bj = np.repeat(((hi[pending, j] - mp[:, j]) / sd[j])[:, None], b, axis=1)
            yj = mp[:, j, None] + sd[j] * truncnorm_std(aj, bj, rng)
            yo = (mp[:, None, o] + (yj - mp[:, j, None])[:, :, None] * g
                  + rng.standard_normal((pending.size, b, k - 1)) @ Lc.T)
            inside = np.all((yo > lo[pending][:, None, o]) & (yo <= hi[pending][:, None, o]),
                            axis=2)
            hit = inside.any(axis=1)
            first = inside.argmax(axis=1)
            rows = pending[hit]
            out[rows, j] = yj[hit, first[hit]]
            out[np.ix_(rows, np.flatnonzero(o))] = yo[hit, first[hit]]
            pending = pending[~hit]
            tried += b
            b *= 2
        if pending.size:
            self.fallbacks += pending.size
            out[pending] = self._gibbs(m[pending], S, lo[pending], hi[pending], rng,
                                       None if init is None else init[pending])
        return out

    def _gibbs(self, m, S, lo, hi, rng, init):
        n, k = m.shape
        y = _box_start(lo, hi, m)
        if init is not None:
            ok = np.all((init > lo) & (init <= hi), axis=1)
            y[ok] = init[ok]
        P = np.linalg.inv(S)
        cond_sd = 1.0 / np.sqrt(np.diag(P))
        for _ in range(self.gibbs_sweeps):
            for j in range(k):
                others = np.arange(k) != j
                cm = m[:, j] - ((y[:, others] - m[:, others]) @ P[j, others]) / P[j, j]
                z = truncnorm_std((lo[:, j] - cm) / cond_sd[j], (hi[:, j] - cm) / cond_sd[j], rng)
                y[:, j] = np.clip(cm + cond_sd[j] * z, np.nextafter(lo[:, j], np.inf), hi[:, j])
        return y


def _box_start(lo, hi, m):
    """A point inside each box, as close to the mean as the box allows."""
    y = np.clip(m, lo, hi)
    bounded = np.isfinite(lo) & np.isfinite(hi)
    y = np.where(bounded & ((y <= lo) | (y > hi)), 0.5 * (lo + hi), y)
    y = np.where(y <= lo, np.where(np.isfinite(hi), hi, lo + 1.0), y)
    return y


def sample_truncated_mvn(mean, cov, box, rng: np.random.Generator,
                         max_proposals: int = 1000, gibbs_sweeps: int = 10) -> np.ndarray:
    """Single draw from N(mean, cov) restricted to a box of trait cells.

    ``box`` is either a sequence of cells or a ``(lo, hi)`` pair of arrays.
    """
    from .model import cells_to_bounds

    if isinstance(box, tuple) and len(box) == 2 and np.ndim(box[0]) == 1:
        lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    else:
        lo, hi = cells_to_bounds(box)
    sampler = TruncatedMVNSampler(max_proposals, gibbs_sweeps)
    return sampler.sample(np.asarray(mean, float)[None], np.asarray(cov, float),
                          lo[None], hi[None], rng)[0]
