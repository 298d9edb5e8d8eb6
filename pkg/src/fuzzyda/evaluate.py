"""Decision regions, simulated error rates, cross-validation and trait selection."""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .classify import (ClassifierConfig, FittedModel, ReferenceCache, _active_mask,
                       p_values_boxes, reward1)
from .gibbs import ChainConfig, fit_all
from .model import (CategoryPrior, Dataset, Design, OrderedCategorical, TraitKind,
                    cell_from_raw)
from .samplers import rng_stream

__all__ = [
    "RegionCell", "trait_cells", "decision_region_grid", "simulate_observations",
    "ErrorReport", "error_sweep", "misclassification_probability", "RhoSearch", "rho_search",
    "ModelSpec", "CvResult", "make_folds", "default_priors", "cross_validate",
    "SelectionStep", "SelectionResult", "forward_selection", "CV_CHAIN",
]

# reduced chain used when refitting inside cross-validation
CV_CHAIN = ChainConfig(iterations=1500, burn_in=500)


# ---------------------------------------------------------------------------
# Shared decision machinery
# ---------------------------------------------------------------------------

def _probabilities(model: FittedModel, x, lo, hi, config: ClassifierConfig,
                   rng: np.random.Generator):
    """Log weights (N, M) and posterior probabilities (M, N) for boxes at ``x``.

    Rows where every active weight vanishes are returned as all-zero
    probabilities (unclassifiable).
    """
    pi = model.prior(config)
    logw, _, _ = model.weights(x, lo, hi, config, rng)
    with np.errstate(divide="ignore"):
        num = np.log(pi)[:, None] + logw
    top = num.max(axis=0)
    ok = np.isfinite(top)
    p = np.zeros_like(num)
    p[:, ok] = np.exp(num[:, ok] - top[ok])
    p[:, ok] /= p[:, ok].sum(axis=0)
    return logw, p.T, ok


def _omega_bars(model: FittedModel, x, lo, hi, logw, config: ClassifierConfig,
                rng: np.random.Generator, cache: ReferenceCache) -> np.ndarray:
    mask = _active_mask(model.N, config.active)
    out = np.zeros((len(lo), model.N))
    for i in np.flatnonzero(mask):
        out[:, i] = p_values_boxes(model.evaluator(i, config.max_draws), x, lo, hi, logw[i],
                                   model.schema, rng, config.n_ref, config.estimator, config.T,
                                   config.n_aug, cache, (i, config.max_draws))
    return out


def _decisions(p, ok, omega_bar, pi, rho: float, tau: float) -> np.ndarray:
    """Boolean (M, N) membership of the set-valued decision for every row."""
    active = pi > 0
    chosen = active[None] & (p >= rho * p.max(axis=1, keepdims=True)) & ok[:, None]
    if tau > 0:
        chosen &= pi[None] * omega_bar >= tau
    return chosen


def _unique_boxes(lo, hi):
    both = np.concatenate([lo, hi], axis=1)
    uniq, inv = np.unique(both, axis=0, return_inverse=True)
    q = lo.shape[1]
    return uniq[:, :q], uniq[:, q:], inv.reshape(-1)


# ---------------------------------------------------------------------------
# Decision regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionCell:
    x: tuple[float, ...]
    traits: tuple[int, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    decision: tuple[int, ...]
    p_hat: np.ndarray
    omega_bar: np.ndarray | None = None


def trait_cells(kind: TraitKind, start: float | None = None, stop: float | None = None):
    """Cells of one trait on its recording lattice, as ``(lo, hi)`` pairs.

    Ordered categorical traits enumerate their categories; rounded continuous
    traits enumerate recorded values from ``start`` to ``stop`` inclusive.
    """
    if isinstance(kind, OrderedCategorical):
        cells = [cell_from_raw(z, kind) for z in range(kind.categories)]
        return [(c.c, c.d) for c in cells]
    if kind.half_width == 0:
        raise ValueError("an exactly recorded trait has no lattice; give explicit cells")
    if start is None or stop is None:
        raise ValueError("continuous traits need start and stop values")
    step = 2 * kind.half_width
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [(start + j * step - kind.half_width, start + j * step + kind.half_width)
            for j in range(n)]


def decision_region_grid(model: FittedModel, x, displayed: Sequence[int],
                         grids: Sequence[Sequence[tuple[float, float]]],
                         config: ClassifierConfig, rng: np.random.Generator) -> list[RegionCell]:
    """Classify every combination of the displayed traits' cells.

    Traits that are not displayed are treated as missing.  Cells are
    returned in row-major order of ``grids``.
    """
    displayed = list(displayed)
    if len(displayed) != len(grids):
        raise ValueError("one grid per displayed trait")
    if len(set(displayed)) != len(displayed) or not all(0 <= k < model.schema.q
                                                         for k in displayed):
        raise ValueError("displayed traits must be distinct trait indices")
    combos = list(itertools.product(*grids))
    M, q = len(combos), model.schema.q
    lo = np.full((M, q), -np.inf)
    hi = np.full((M, q), np.inf)
    for j, combo in enumerate(combos):
        for k, (c, d) in zip(displayed, combo):
            lo[j, k], hi[j, k] = c, d
    pi = model.prior(config)
    logw, p, ok = _probabilities(model, x, lo, hi, config, rng)
    omega_bar = None
    if config.tau > 0:
        omega_bar = _omega_bars(model, x, lo, hi, logw, config, rng, ReferenceCache())
    chosen = _decisions(p, ok, omega_bar, pi, config.rho, config.tau)
    xt = tuple(float(v) for v in np.asarray(x, float).reshape(-1))
    return [RegionCell(xt, tuple(displayed), tuple(map(float, lo[j, displayed])),
                       tuple(map(float, hi[j, displayed])),
                       tuple(int(i) for i in np.flatnonzero(chosen[j])), p[j],
                       None if omega_bar is None else omega_bar[j])
            for j in range(M)]


# ---------------------------------------------------------------------------
# Simulated error rates
# ---------------------------------------------------------------------------

def simulate_observations(model: FittedModel, x, n_sim: int, rng: np.random.Generator,
                          pi: np.ndarray | None = None):
    """Draw categories from ``pi``, latent traits from the posterior predictive
    at ``x`` and obfuscate them through the schema.

    Returns ``(labels, lo, hi)``.
    """
    pi = model.pi / model.pi.sum() if pi is None else np.asarray(pi, dtype=float)
    labels = rng.choice(model.N, size=n_sim, p=pi)
    y = np.empty((n_sim, model.schema.q))
    for i in range(model.N):
        rows = np.flatnonzero(labels == i)
        if rows.size == 0:
            continue
        ev = model.evaluator(i)
        a, mu = ev.locate(x)
        L, _, _ = ev.factors(a, tuple(range(ev.q)))
        r = rng.integers(ev.R, size=rows.size)
        z = rng.standard_normal((rows.size, ev.q))
        y[rows] = mu[r] + np.einsum("nij,nj->ni", L[r], z)
    lo, hi = model.schema.obfuscate(y)
    return labels, lo, hi


@dataclass(frozen=True)
class ErrorReport:
    """Simulated error and indecision rates at one covariate value."""

    x: tuple[float, ...]
    rho: float
    tau: float
    n_sim: int
    wrong: float          # P(I not in decision)
    multiple: float       # P(|decision| > 1)
    empty: float          # P(decision empty)
    not_single: float     # P(|decision| != 1)
    unclassifiable: int
    plug_in: bool
    config: dict = field(default_factory=dict)

    def se(self, name: str) -> float:
        """Binomial standard error of one of the rates."""
        v = getattr(self, name)
        return math.sqrt(v * (1 - v) / self.n_sim)

    def row(self) -> dict:
        out = {"x": " ".join(f"{v:g}" for v in self.x), "rho": self.rho, "tau": self.tau,
               "n_sim": self.n_sim, "plug_in": int(self.plug_in)}
        for name in ("wrong", "multiple", "empty", "not_single"):
            out[name] = float(f"{getattr(self, name):.6g}")
            out[f"{name}_se"] = float(f"{self.se(name):.6g}")
        out["unclassifiable"] = self.unclassifiable
        return out


def error_sweep(model: FittedModel, scenarios: Sequence, config: ClassifierConfig, n_sim: int,
                rng: np.random.Generator, rhos: Sequence[float] | None = None,
                taus: Sequence[float] | None = None, plug_in: bool = False) -> list[ErrorReport]:
    """Error reports for every (scenario, rho, tau) on common random numbers.

    One simulated sample per scenario is classified under every (rho, tau),
    so the rates are exactly monotone in rho and tau.
    """
    if n_sim < 1:
        raise ValueError("n_sim must be >= 1")
    rhos = [config.rho] if rhos is None else list(rhos)
    taus = [config.tau] if taus is None else list(taus)
    model = model.plug_in() if plug_in else model
    pi = model.prior(config)
    echo = {k: v for k, v in vars(config).items() if k not in ("rho", "tau")}
    reports = []
    for x in scenarios:
        labels, lo, hi = simulate_observations(model, x, n_sim, rng, pi)
        ulo, uhi, inv = _unique_boxes(lo, hi)
        logw, p, ok = _probabilities(model, x, ulo, uhi, config, rng)
        omega_bar = None
        if any(t > 0 for t in taus):
            omega_bar = _omega_bars(model, x, ulo, uhi, logw, config, rng, ReferenceCache())
        bad = int((~ok[inv]).sum())
        xt = tuple(float(v) for v in np.asarray(x, float).reshape(-1))
        for rho in rhos:
            for tau in taus:
                chosen = _decisions(p, ok, omega_bar, pi, rho, tau)[inv]
                size = chosen.sum(axis=1)
                hit = chosen[np.arange(n_sim), labels]
                reports.append(ErrorReport(
                    xt, float(rho), float(tau), n_sim, float(np.mean(~hit)),
                    float(np.mean(size > 1)), float(np.mean(size == 0)),
                    float(np.mean(size != 1)), bad, plug_in, echo))
    return reports


def misclassification_probability(model: FittedModel, x, config: ClassifierConfig, n_sim: int,
                                  rng: np.random.Generator, plug_in: bool = False) -> ErrorReport:
    return error_sweep(model, [x], config, n_sim, rng, plug_in=plug_in)[0]


@dataclass(frozen=True)
class RhoSearch:
    rho: float
    error: float
    feasible: bool
    grid: tuple[tuple[float, float], ...]


def rho_search(model: FittedModel, scenarios: Sequence, psi: float, config: ClassifierConfig,
               n_sim: int, rng: np.random.Generator, plug_in: bool = False,
               tol: float = 1e-4) -> RhoSearch:
    """Largest rho whose simulated P(I not in decision) is at most ``psi`` percent.

    The error is the worst case over ``scenarios``.  One simulated sample is
    reused for every rho.  Bisection brackets the threshold and a 21-point
    grid over the final bracket guards against Monte Carlo non-monotonicity.
    """
    if not 0 < psi <= 100:
        raise ValueError("psi must lie in (0, 100]")
    target = psi / 100
    model = model.plug_in() if plug_in else model
    pi = model.prior(config)
    sims = []
    for x in scenarios:
        labels, lo, hi = simulate_observations(model, x, n_sim, rng, pi)
        ulo, uhi, inv = _unique_boxes(lo, hi)
        logw, p, ok = _probabilities(model, x, ulo, uhi, config, rng)
        omega_bar = None
        if config.tau > 0:
            omega_bar = _omega_bars(model, x, ulo, uhi, logw, config, rng, ReferenceCache())
        sims.append((labels, inv, p, ok, omega_bar))

    def error(rho: float) -> float:
        worst = 0.0
        for labels, inv, p, ok, omega_bar in sims:
            chosen = _decisions(p, ok, omega_bar, pi, rho, config.tau)[inv]
            worst = max(worst, float(np.mean(~chosen[np.arange(len(labels)), labels])))
        return worst

    e0 = error(0.0)
    if e0 > target:
        return RhoSearch(0.0, e0, False, ((0.0, e0),))
    e1 = error(1.0)
    if e1 <= target:
        return RhoSearch(1.0, e1, True, ((1.0, e1),))
    a, b = 0.0, 1.0  # error(a) <= target < error(b)
    while b - a > tol:
        mid = 0.5 * (a + b)
        if error(mid) <= target:
            a = mid
        else:
            b = mid
    grid = tuple((float(r), error(float(r))) for r in np.linspace(max(0.0, a - 10 * tol),
                                                                   min(1.0, b + 10 * tol), 21))
    ok = [r for r, e in grid if e <= target]
    rho = max(ok) if ok else a
    return RhoSearch(rho, error(rho), True, grid)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """A candidate model: a trait subset and a covariate design."""

    name: str
    traits: tuple[int, ...]
    design: Design


@dataclass
class CvResult:
    scores: dict[str, float]
    folds: list[list[np.ndarray]]
    winner: str
    n_fits: int
    rewards: dict[str, np.ndarray] = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "scores": {k: float(f"{v:.6g}") for k, v in self.scores.items()},
            "winner": self.winner,
            "n_fits": self.n_fits,
            "folds": [[f.tolist() for f in cat] for cat in self.folds],
        }


def make_folds(labels: np.ndarray, N: int, kappa: int,
               rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Per-category random folds whose sizes differ by at most one.

    ``folds[i][l]`` holds the dataset rows of category ``i`` left out in fold ``l``.
    """
    if kappa < 2:
        raise ValueError("kappa must be >= 2")
    folds = []
    for i in range(N):
        rows = np.flatnonzero(labels == i)
        if 0 < len(rows) < kappa:
            warnings.warn(f"category {i} has {len(rows)} observations for {kappa} folds; "
                          "some folds leave none of it out", stacklevel=2)
        perm = rows[rng.permutation(len(rows))]
        folds.append([np.sort(f) for f in np.array_split(perm, kappa)])
    return folds


def _centres(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    c = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), np.nan)
    c = np.where(np.isneginf(lo) & np.isfinite(hi), hi - 0.5, c)
    return np.where(np.isfinite(lo) & np.isposinf(hi), lo + 0.5, c)


def default_priors(dataset: Dataset, design: Design) -> list[CategoryPrior]:
    """Weakly informative priors centred on the data.

    Each category's intercepts are its trait means (cell centres), slopes
    are centred at 0 and every coefficient has prior variance four times the
    largest pooled trait variance.  The covariance prior has ``q + 3``
    degrees of freedom and mean equal to the pooled within-category variances.
    """
    q = dataset.schema.q
    c = _centres(dataset.lo, dataset.hi)
    overall = np.nanmean(c, axis=0) if np.isfinite(c).any() else np.zeros(q)
    overall = np.where(np.isfinite(overall), overall, 0.0)
    resid = []
    means = []
    for i in range(dataset.N):
        ci = c[dataset.labels == i]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = np.nanmean(ci, axis=0) if len(ci) else overall
        m = np.where(np.isfinite(m), m, overall)
        means.append(m)
        resid.append(ci - m)
    r = np.concatenate(resid) if resid else np.zeros((0, q))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var = np.nanmean(r ** 2, axis=0)
    var = np.where(np.isfinite(var) & (var > 0), var, 1.0)
    nu0 = q + 3.0
    V0 = np.diag(var) * (nu0 - q - 1)
    SigmaB = np.eye(design.p + 1) * 4 * var.max()
    priors = []
    for m in means:
        B0 = np.zeros((design.p + 1, q))
        B0[0] = m
        priors.append(CategoryPrior(B0, SigmaB, nu0, V0))
    return priors


PriorFactory = Callable[[Dataset, Design], Sequence[CategoryPrior]]


def _job_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def _cv_job(args):
    (dataset, spec, test_rows, chain_config, classifier, prior_factory, pi, seed, m, l) = args
    train = np.setdiff1d(np.arange(dataset.n), test_rows)
    data = dataset.select_traits(spec.traits)
    train_data = data.rows(train)
    priors = list(prior_factory(train_data, spec.design))
    cfg = replace(chain_config, seed=_job_seed(seed, 1, m, l))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        chains = fit_all(train_data, priors, cfg, spec.design)
    model = FittedModel(data.schema, data.class_map, spec.design, data.categories, chains, pi)
    rng = rng_stream(_job_seed(seed, 2, m, l))
    rewards = np.zeros(len(test_rows))
    config = replace(classifier, pi=tuple(pi))
    cov = data.covariates[test_rows]
    keys, inv = np.unique(cov, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for g, x in enumerate(keys):
        rows = np.flatnonzero(inv == g)
        idx = test_rows[rows]
        lo, hi = data.lo[idx], data.hi[idx]
        logw, p, ok = _probabilities(model, x, lo, hi, config, rng)
        omega_bar = None
        if config.tau > 0:
            omega_bar = _omega_bars(model, x, lo, hi, logw, config, rng, ReferenceCache())
        chosen = _decisions(p, ok, omega_bar, model.prior(config), config.rho, config.tau)
        for j, r in enumerate(rows):
            rewards[r] = reward1(np.flatnonzero(chosen[j]), data.labels[idx[j]])
    return rewards


def cross_validate(dataset: Dataset, kappa: int, specs: Sequence[ModelSpec],
                   chain_config: ChainConfig = CV_CHAIN,
                   classifier: ClassifierConfig = ClassifierConfig(rho=1.0, tau=0.0),
                   weights: str | Sequence[float] = "uniform", seed: int = 0,
                   prior_factory: PriorFactory = default_priors, pi=None, workers: int = 1,
                   folds: list[list[np.ndarray]] | None = None) -> CvResult:
    """kappa-fold cross-validated average reward of every model spec.

    The reward is ``reward1`` of the decision at the classifier's (rho, tau);
    left-out observations keep their obfuscation.  ``weights`` is
    ``"uniform"`` (``1/N``), ``"proportional"`` (``n_i / n``) or explicit.
    """
    N = dataset.N
    counts = dataset.counts()
    if isinstance(weights, str):
        if weights == "uniform":
            w = np.full(N, 1.0 / N)
        elif weights == "proportional":
            w = counts / counts.sum()
        else:
            raise ValueError(f"unknown weighting {weights!r}")
    else:
        w = np.asarray(weights, dtype=float)
        if len(w) != N or np.any(w <= 0) or not math.isclose(w.sum(), 1.0):
            raise ValueError("weights must be positive and sum to 1")
    if folds is None:
        folds = make_folds(dataset.labels, N, kappa, rng_stream(seed, 0))
    kappa = len(folds[0])
    pi = np.full(N, 1.0 / N) if pi is None else np.asarray(pi, dtype=float)
    tests = [np.sort(np.concatenate([folds[i][l] for i in range(N)])).astype(np.intp)
             for l in range(kappa)]
    jobs = [(dataset, spec, tests[l], chain_config, classifier, prior_factory, pi, seed, m, l)
            for m, spec in enumerate(specs) for l in range(kappa)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cv_job, jobs))
    else:
        results = [_cv_job(j) for j in jobs]
    scores, rewards = {}, {}
    scale = np.where(counts > 0, w / np.maximum(counts, 1), 0.0)
    for m, spec in enumerate(specs):
        r = np.zeros(dataset.n)
        for l in range(kappa):
            r[tests[l]] = results[m * kappa + l]
        rewards[spec.name] = r
        scores[spec.name] = float(np.sum(scale[dataset.labels] * r))
    names = [s.name for s in specs]
    winner = max(names, key=lambda n: (scores[n], -names.index(n)))
    return CvResult(scores, folds, winner, len(jobs), rewards)


@dataclass(frozen=True)
class SelectionStep:
    traits: tuple[int, ...]
    score: float
    candidates: dict[int, float]


@dataclass
class SelectionResult:
    traces: dict[str, list[SelectionStep]]
    folds: list[list[np.ndarray]]
    n_fits: int

    def best(self, scenario: str) -> SelectionStep:
        steps = self.traces[scenario]
        return max(steps, key=lambda s: (s.score, -len(s.traits)))

    def record(self, trait_names: Sequence[str] | None = None) -> dict:
        def names(ts):
            return [trait_names[t] for t in ts] if trait_names else list(ts)
        return {
            "n_fits": self.n_fits,
            "traces": {sc: [{"traits": names(s.traits), "score": float(f"{s.score:.6g}")}
                            for s in steps] for sc, steps in self.traces.items()},
            "folds": [[f.tolist() for f in cat] for cat in self.folds],
        }


def forward_selection(dataset: Dataset, scenarios: Mapping[str, Design], kappa: int,
                      chain_config: ChainConfig = CV_CHAIN,
                      classifier: ClassifierConfig = ClassifierConfig(rho=1.0, tau=0.0),
                      weights: str | Sequence[float] = "uniform", seed: int = 0,
                      prior_factory: PriorFactory = default_priors, pi=None,
                      max_traits: int | None = None, workers: int = 1) -> SelectionResult:
    """Greedy forward trait selection by cross-validated reward, per covariate scenario.

    Each step adds the trait with the best score (lowest index on ties).
    All models share one fold assignment.
    """
    q = dataset.schema.q
    if q < 2:
        raise ValueError("forward selection needs at least two traits")
    max_traits = q - 1 if max_traits is None else max_traits
    folds = make_folds(dataset.labels, dataset.N, kappa, rng_stream(seed, 0))
    traces: dict[str, list[SelectionStep]] = {}
    n_fits = 0
    for s_idx, (sc_name, design) in enumerate(scenarios.items()):
        selected: list[int] = []
        steps = []
        for step in range(max_traits):
            cand = [t for t in range(q) if t not in selected]
            specs = [ModelSpec(f"{sc_name}|{'+'.join(map(str, selected + [t]))}",
                               tuple(selected + [t]), design) for t in cand]
            res = cross_validate(dataset, kappa, specs, chain_config, classifier, weights,
                                 _job_seed(seed, 3, s_idx, step), prior_factory, pi, workers,
                                 folds)
            n_fits += res.n_fits
            scores = {t: res.scores[sp.name] for t, sp in zip(cand, specs)}
            best = max(cand, key=lambda t: (scores[t], -t))
            selected.append(best)
            steps.append(SelectionStep(tuple(selected), scores[best], scores))
        traces[sc_name] = steps
    return SelectionResult(traces, folds, n_fits)
