"""Domain types: trait schema, obfuscated cells, covariates, priors and parameters.

Trait cells are stored in two encodings.  The object form (:class:`Exact`,
:class:`Interval`, :data:`MISSING`) is used at API boundaries; hot paths use
a pair of float arrays ``(lo, hi)`` where an exact value has ``lo == hi``,
an interval ``(c, d]`` has ``lo = c < hi = d`` and a missing value is
``(-inf, inf)``.
"""

from __future__ import annotations

import math
from itertools import combinations
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Continuous", "OrderedCategorical", "TraitKind", "TraitSchema",
    "Exact", "Interval", "Missing", "MISSING", "TraitCell",
    "Observation", "ClassRule", "CovarianceClassMap", "Design",
    "CategoryPrior", "Priors", "CategoryParams", "Dataset",
    "vec", "unvec", "design_matrix", "cell_from_raw", "center_point",
    "cells_to_bounds", "bounds_to_cells", "cell_contains",
]


# ---------------------------------------------------------------------------
# Trait kinds and schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Continuous:
    """Continuous trait recorded to the nearest multiple of ``2*half_width``.

    ``half_width == 0`` means the trait is observed exactly.
    """

    half_width: float = 0.0

    def __post_init__(self):
        if not (self.half_width >= 0 and math.isfinite(self.half_width)):
            raise ValueError(f"half_width must be finite and >= 0, got {self.half_width}")


@dataclass(frozen=True)
class OrderedCategorical:
    """Ordered categorical trait with categories ``0..categories-1``.

    With ``auxiliary=True`` two never-observed sentinel bins sit below 0 and
    above ``categories-1``, so every observed bin is the unit interval
    ``(z-1/2, z+1/2]``.  With ``auxiliary=False`` the end bins are half-infinite.
    """

    categories: int
    auxiliary: bool = True

    def __post_init__(self):
        if int(self.categories) != self.categories or self.categories < 2:
            raise ValueError(f"categories must be an integer >= 2, got {self.categories}")


TraitKind = Union[Continuous, OrderedCategorical]


@dataclass(frozen=True)
class TraitSchema:
    names: tuple[str, ...]
    kinds: tuple[TraitKind, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if len(self.names) == 0:
            raise ValueError("schema needs at least one trait")
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"trait names must be unique: {self.names}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, TraitKind]]) -> "TraitSchema":
        pairs = list(pairs)
        return cls(tuple(n for n, _ in pairs), tuple(k for _, k in pairs))

    @property
    def q(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown trait {name!r}") from None

    def select(self, idx: Sequence[int]) -> "TraitSchema":
        return TraitSchema(tuple(self.names[i] for i in idx), tuple(self.kinds[i] for i in idx))

    def obfuscate(self, y: np.ndarray, like_lo: np.ndarray | None = None,
                  like_hi: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Map latent trait values ``y`` (n x q) to cell bounds through the schema.

        If a reference pattern ``(like_lo, like_hi)`` (length q) is given, coordinates
        that are exact in the reference stay exact, missing ones become missing and
        explicit intervals on exactly-recorded traits reuse the reference width.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        lo = np.empty_like(y)
        hi = np.empty_like(y)
        for k, kind in enumerate(self.kinds):
            lo[:, k], hi[:, k] = _obfuscate_column(y[:, k], kind)
        if like_lo is not None:
            like_lo = np.asarray(like_lo, dtype=float)
            like_hi = np.asarray(like_hi, dtype=float)
            for k in range(self.q):
                if like_lo[k] == like_hi[k]:
                    lo[:, k] = hi[:, k] = y[:, k]
                elif np.isneginf(like_lo[k]) and np.isposinf(like_hi[k]):
                    lo[:, k], hi[:, k] = -np.inf, np.inf
                elif isinstance(self.kinds[k], Continuous) and self.kinds[k].half_width == 0:
                    w = like_hi[k] - like_lo[k]
                    if math.isfinite(w):
                        cell = np.ceil((y[:, k] - like_hi[k]) / w)
                        lo[:, k] = like_lo[k] + cell * w
                        hi[:, k] = like_hi[k] + cell * w
        return lo, hi


def _obfuscate_column(y: np.ndarray, kind: TraitKind) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(kind, Continuous):
        h = kind.half_width
        if h == 0:
            return y.copy(), y.copy()
        # centre z on the lattice 2h*Z with y in (z-h, z+h]
        z = 2 * h * np.ceil((y - h) / (2 * h))
        return z - h, z + h
    g = kind.categories
    z = np.ceil(y - 0.5)
    lo = z - 0.5
    hi = z + 0.5
    if kind.auxiliary:
        bottom, top = z < 0, z > g - 1
        lo[bottom], hi[bottom] = -np.inf, -0.5
        lo[top], hi[top] = g - 0.5, np.inf
    else:
        bottom, top = z <= 0, z >= g - 1
        lo[bottom], hi[bottom] = -np.inf, 0.5
        lo[top], hi[top] = g - 1.5, np.inf
    return lo, hi


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Exact:
    y: float


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``(c, d]``; either end may be infinite."""

    c: float
    d: float

    def __post_init__(self):
        if not self.c < self.d:
            raise ValueError(f"interval needs c < d, got ({self.c}, {self.d}]")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.c) and math.isfinite(self.d)

    @property
    def width(self) -> float:
        return self.d - self.c


@dataclass(frozen=True)
class Missing:
    pass


MISSING = Missing()
TraitCell = Union[Exact, Interval, Missing]


def cell_contains(cell: TraitCell, y: float) -> bool:
    if isinstance(cell, Exact):
        return y == cell.y
    if isinstance(cell, Interval):
        return cell.c < y <= cell.d
    return True


def cells_to_bounds(cells: Sequence[TraitCell]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.empty(len(cells))
    hi = np.empty(len(cells))
    for k, cell in enumerate(cells):
        if isinstance(cell, Exact):
            lo[k] = hi[k] = cell.y
        elif isinstance(cell, Interval):
            lo[k], hi[k] = cell.c, cell.d
        elif isinstance(cell, Missing):
            lo[k], hi[k] = -np.inf, np.inf
        else:
            raise TypeError(f"not a trait cell: {cell!r}")
    return lo, hi


def bounds_to_cells(lo: Sequence[float], hi: Sequence[float]) -> tuple[TraitCell, ...]:
    out: list[TraitCell] = []
    for a, b in zip(lo, hi):
        a, b = float(a), float(b)
        if a == b:
            out.append(Exact(a))
        elif a == -math.inf and b == math.inf:
            out.append(MISSING)
        else:
            out.append(Interval(a, b))
    return tuple(out)


def cell_from_raw(value: float, kind: TraitKind) -> TraitCell:
    """Encode a recorded value (a rounded measurement or a category code) as a cell.

    >>> cell_from_raw(67, Continuous(0.5))
    Interval(c=66.5, d=67.5)
    """
    if isinstance(kind, Continuous):
        if kind.half_width == 0:
            return Exact(float(value))
        return Interval(float(value) - kind.half_width, float(value) + kind.half_width)
    g = kind.categories
    if int(value) != value or not 0 <= value <= g - 1:
        raise ValueError(f"category {value} outside 0..{g - 1}")
    z = int(value)
    if not kind.auxiliary:
        if z == 0:
            return Interval(-math.inf, 0.5)
        if z == g - 1:
            return Interval(g - 1.5, math.inf)
    return Interval(z - 0.5, z + 0.5)


def center_point(cell: TraitCell, kind: TraitKind | None = None) -> float:
    """Representative point of a cell.

    Bounded intervals give their midpoint.  A half-infinite ordinal end bin
    gives the category it encodes, i.e. its finite end moved half a unit
    inwards (``(-inf, 1/2] -> 0`` and ``(g-3/2, inf) -> g-1``).
    """
    if isinstance(cell, Exact):
        return cell.y
    if isinstance(cell, Missing):
        raise ValueError("a missing cell has no centre point")
    if cell.bounded:
        return 0.5 * (cell.c + cell.d)
    if isinstance(kind, Continuous):
        raise ValueError("half-infinite cell on a continuous trait has no centre point")
    if math.isfinite(cell.d):
        return cell.d - 0.5
    if math.isfinite(cell.c):
        return cell.c + 0.5
    raise ValueError("unbounded interval has no centre point")


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    covariates: tuple[float, ...]
    cells: tuple[TraitCell, ...]
    label: int | None = None  # 0-based category index

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))
        object.__setattr__(self, "cells", tuple(self.cells))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return cells_to_bounds(self.cells)


@dataclass(frozen=True)
class ClassRule:
    """Predicate on raw covariates.

    ``when`` maps a covariate name to either a value (equality) or a
    ``(low, high)`` pair meaning ``low <= v < high``.  An empty ``when`` matches
    everything.
    """

    name: str
    when: Mapping[str, object] = field(default_factory=dict)

    def matches(self, values: Mapping[str, float]) -> bool:
        for key, cond in self.when.items():
            v = values[key]
            if isinstance(cond, (tuple, list)):
                low, high = cond
                if not (low <= v < high):
                    return False
            elif v != cond:
                return False
        return True


@dataclass(frozen=True)
class CovarianceClassMap:
    """Ordered rules, first match wins; the last rule must be a catch-all."""

    covariate_names: tuple[str, ...]
    rules: tuple[ClassRule, ...]

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.rules:
            raise ValueError("class map needs at least one rule")
        if self.rules[-1].when:
            raise ValueError("the last covariance-class rule must be a catch-all")
        for rule in self.rules:
            unknown = set(rule.when) - set(self.covariate_names)
            if unknown:
                raise ValueError(f"rule {rule.name!r} refers to unknown covariates {sorted(unknown)}")

    @classmethod
    def single(cls, covariate_names: Sequence[str] = ()) -> "CovarianceClassMap":
        return cls(tuple(covariate_names), (ClassRule("all"),))

    @property
    def A(self) -> int:
        return len(self.rules)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.rules)

    def __call__(self, covariates: Sequence[float]) -> int:
        values = dict(zip(self.covariate_names, covariates))
        for a, rule in enumerate(self.rules):
            if rule.matches(values):
                return a
        raise AssertionError("unreachable: catch-all rule did not match")

    def classes(self, covariates: np.ndarray) -> np.ndarray:
        covariates = _rows(covariates, len(self.covariate_names))
        return np.array([self(row) for row in covariates], dtype=np.intp)


def _rows(raw, p: int) -> np.ndarray:
    """Coerce covariates to an (n x p) array; a 1-d input is a single row."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim < 2:
        raw = raw.reshape(1, -1) if p == 0 or raw.size == p else raw.reshape(-1, p)
    if raw.shape[1] != p:
        raise ValueError(f"expected {p} covariates per row, got {raw.shape[1]}")
    return raw


@dataclass(frozen=True)
class Design:
    """Maps raw covariates to design covariates (without the intercept).

    Each term is a tuple of raw covariate names whose product forms one
    column, so ``("age",)`` is a main effect and ``("age", "season")`` an
    interaction.
    """

    covariate_names: tuple[str, ...]
    terms: tuple[tuple[str, ...], ...]

    @classmethod
    def main_effects(cls, covariate_names: Sequence[str]) -> "Design":
        names = tuple(covariate_names)
        return cls(names, tuple((n,) for n in names))

    @classmethod
    def parse(cls, covariate_names: Sequence[str], formula: str) -> "Design":
        """Parse formulas such as ``"age"``, ``"age+season"`` or ``"age*season"``.

        ``a*b`` expands to ``a + b + a:b``; ``1`` or an empty string means
        intercept only.
        """
        names = tuple(covariate_names)
        terms: list[tuple[str, ...]] = []
        formula = formula.replace(" ", "")
        for part in filter(None, formula.split("+")):
            if part == "1":
                continue
            if "*" in part:
                factors = part.split("*")
                for r in range(1, len(factors) + 1):
                    for combo in combinations(factors, r):
                        terms.append(tuple(combo))
            else:
                terms.append(tuple(part.split(":")))
        seen: list[tuple[str, ...]] = []
        for t in terms:
            for f in t:
                if f not in names:
                    raise ValueError(f"unknown covariate {f!r} in formula {formula!r}")
            if t not in seen:
                seen.append(t)
        return cls(names, tuple(seen))

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def column_names(self) -> tuple[str, ...]:
        return ("(intercept)",) + tuple(":".join(t) for t in self.terms)

    def expand(self, raw: np.ndarray) -> np.ndarray:
        raw = _rows(raw, len(self.covariate_names))
        cols = [np.prod(raw[:, [self.covariate_names.index(f) for f in t]], axis=1)
                for t in self.terms]
        if not cols:
            return np.empty((raw.shape[0], 0))
        return np.column_stack(cols)

    def matrix(self, raw: np.ndarray) -> np.ndarray:
        return design_matrix(self.expand(raw))


# ---------------------------------------------------------------------------
# Priors and parameters
# ---------------------------------------------------------------------------

def _spd(name: str, m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass(frozen=True)
class CategoryPrior:
    """Normal prior on vec(B) with covariance ``I_q (x) SigmaB`` and IW(nu0, V0) on each covariance."""

    B0: np.ndarray
    SigmaB: np.ndarray
    nu0: float
    V0: np.ndarray

    def __post_init__(self):
        B0 = np.atleast_2d(np.asarray(self.B0, dtype=float))
        SigmaB = np.atleast_2d(np.asarray(self.SigmaB, dtype=float))
        V0 = np.atleast_2d(np.asarray(self.V0, dtype=float))
        object.__setattr__(self, "B0", B0)
        object.__setattr__(self, "SigmaB", SigmaB)
        object.__setattr__(self, "V0", V0)
        object.__setattr__(self, "nu0", float(self.nu0))
        _spd("SigmaB", SigmaB)
        _spd("V0", V0)
        if SigmaB.shape[0] != B0.shape[0]:
            raise ValueError(f"SigmaB is {SigmaB.shape}, B0 has {B0.shape[0]} rows")
        if V0.shape[0] != B0.shape[1]:
            raise ValueError(f"V0 is {V0.shape}, B0 has {B0.shape[1]} columns")
        if not self.nu0 > self.q - 1:
            raise ValueError(f"nu0 must exceed q-1 = {self.q - 1}, got {self.nu0}")

    @property
    def q(self) -> int:
        return self.B0.shape[1]

    @property
    def p(self) -> int:
        return self.B0.shape[0] - 1

    @property
    def beta0(self) -> np.ndarray:
        return vec(self.B0)

    def restrict(self, traits: Sequence[int] | None = None,
                 rows: Sequence[int] | None = None) -> "CategoryPrior":
        """Sub-prior for a subset of traits and design rows (row 0 is the intercept)."""
        t = list(range(self.q)) if traits is None else list(traits)
        r = list(range(self.p + 1)) if rows is None else list(rows)
        return CategoryPrior(self.B0[np.ix_(r, t)], self.SigmaB[np.ix_(r, r)],
                             self.nu0, self.V0[np.ix_(t, t)])


@dataclass(frozen=True)
class Priors:
    categories: tuple[CategoryPrior, ...]
    pi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if pi.shape != (len(self.categories),):
            raise ValueError("pi needs one entry per category")
        if np.any(pi < 0) or not math.isclose(pi.sum(), 1.0, rel_tol=1e-9):
            raise ValueError(f"pi must be non-negative and sum to 1, got {pi}")

    @property
    def N(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class CategoryParams:
    """Regression matrix ``B`` ((p+1) x q) and one covariance per class ``Sigmas`` (A x q x q)."""

    B: np.ndarray
    Sigmas: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        S = np.asarray(self.Sigmas, dtype=float)
        if S.ndim == 2:
            S = S[None]
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Sigmas", S)
        if S.shape[1:] != (B.shape[1], B.shape[1]):
            raise ValueError(f"Sigmas {S.shape} do not match q = {B.shape[1]}")

    @property
    def A(self) -> int:
        return self.Sigmas.shape[0]

    def mean(self, x: np.ndarray) -> np.ndarray:
        """Trait mean for a design row ``x`` (intercept included)."""
        return np.asarray(x, dtype=float) @ self.B


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Labelled training data stored column-wise.

    ``covariates`` holds raw covariates (n x len(covariate_names)); ``lo``/``hi``
    the trait cells; ``labels`` 0-based category indices.
    """

    schema: TraitSchema
    covariate_names: tuple[str, ...]
    class_map: CovarianceClassMap
    categories: tuple[str, ...]
    covariates: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "categories", tuple(self.categories))
        n = len(self.labels)
        cov = np.asarray(self.covariates, dtype=float).reshape(n, len(self.covariate_names))
        lo = np.asarray(self.lo, dtype=float).reshape(n, self.schema.q)
        hi = np.asarray(self.hi, dtype=float).reshape(n, self.schema.q)
        labels = np.asarray(self.labels, dtype=np.intp)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "labels", labels)
        if np.any(labels < 0) or np.any(labels >= len(self.categories)):
            raise ValueError("labels outside 0..N-1")
        if np.any(lo > hi):
            raise ValueError("cells with lo > hi")
        if tuple(self.class_map.covariate_names) != self.covariate_names:
            raise ValueError("class map covariates differ from dataset covariates")

    @classmethod
    def from_observations(cls, schema: TraitSchema, covariate_names: Sequence[str],
                          class_map: CovarianceClassMap, categories: Sequence[str],
                          observations: Sequence[Observation]) -> "Dataset":
        p = len(covariate_names)
        n = len(observations)
        cov = np.empty((n, p))
        lo = np.empty((n, schema.q))
        hi = np.empty((n, schema.q))
        labels = np.empty(n, dtype=np.intp)
        for j, obs in enumerate(observations):
            if len(obs.covariates) != p:
                raise ValueError(f"observation {j}: {len(obs.covariates)} covariates, expected {p}")
            if len(obs.cells) != schema.q:
                raise ValueError(f"observation {j}: {len(obs.cells)} cells, expected {schema.q}")
            if obs.label is None:
                raise ValueError(f"observation {j} has no label")
            cov[j] = obs.covariates
            lo[j], hi[j] = obs.bounds()
            labels[j] = obs.label
        return cls(schema, tuple(covariate_names), class_map, tuple(categories), cov, lo, hi, labels)

    @property
    def N(self) -> int:
        return len(self.categories)

    @property
    def n(self) -> int:
        return len(self.labels)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.N)

    def observations(self) -> list[Observation]:
        return [Observation(tuple(self.covariates[j]), bounds_to_cells(self.lo[j], self.hi[j]),
                            int(self.labels[j])) for j in range(self.n)]

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.schema, self.covariate_names, self.class_map, self.categories,
                       self.covariates[idx], self.lo[idx], self.hi[idx], self.labels[idx])

    def category_rows(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.labels == i)

    def select_traits(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.schema.select(idx), self.covariate_names, self.class_map,
                       self.categories, self.covariates, self.lo[:, idx], self.hi[:, idx],
                       self.labels)


# ---------------------------------------------------------------------------
# Linear-algebra helpers
# ---------------------------------------------------------------------------

def vec(M: np.ndarray) -> np.ndarray:
    """Stack the columns of ``M`` into one vector."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, cols), order="F")


def design_matrix(covariates) -> np.ndarray:
    """Prepend the intercept column to an (n x p) covariate array."""
    if isinstance(covariates, np.ndarray):
        cov = covariates.astype(float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1) if cov.size else cov.reshape(0, 0)
    else:
        rows = [tuple(r.covariates) if isinstance(r, Observation) else tuple(r) for r in covariates]
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise ValueError(f"covariate vectors differ in length: {sorted(widths)}")
        p = widths.pop() if widths else 0
        cov = np.array(rows, dtype=float).reshape(len(rows), p)
    return np.column_stack([np.ones(cov.shape[0]), cov])
