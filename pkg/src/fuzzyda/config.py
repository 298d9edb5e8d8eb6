"""Run configuration (YAML) and CSV data exchange."""

from __future__ import annotations

import csv
import io
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
import yaml

from .classify import ClassifierConfig
from .gibbs import ChainConfig
from .model import (MISSING, CategoryParams, CategoryPrior, ClassRule, Continuous,
                    CovarianceClassMap, Dataset, Design, Interval,
                    OrderedCategorical, TraitCell, TraitKind, TraitSchema, cell_from_raw,
                    cells_to_bounds)

__all__ = ["RunConfig", "ConfigError", "DataError", "load_config", "default_seed",
           "ingest_csv", "read_rows", "format_cell", "write_dataset_csv", "SEED_ENV"]

SEED_ENV = "FUZZYDA_SEED"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def default_seed() -> int:
    """Built-in default seed, overridable through ``FUZZYDA_SEED``."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _matrix(value, shape, name) -> np.ndarray:
    try:
        m = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: not a numeric matrix") from None
    if m.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {m.shape}")
    return m


def _kind_from_dict(d: dict) -> TraitKind:
    kind = d.get("kind", "continuous")
    if kind == "continuous":
        return Continuous(float(d.get("half_width", 0.0)))
    if kind == "ordinal":
        return OrderedCategorical(int(d["categories"]), bool(d.get("auxiliary", True)))
    raise ConfigError(f"trait {d.get('name')!r}: unknown kind {kind!r}")


def _kind_to_dict(name: str, kind: TraitKind) -> dict:
    if isinstance(kind, Continuous):
        return {"name": name, "kind": "continuous", "half_width": kind.half_width}
    return {"name": name, "kind": "ordinal", "categories": kind.categories,
            "auxiliary": kind.auxiliary}


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run configuration.

    ``priors`` is ``None`` when the config gives no coefficient priors; fits
    then use weakly informative data-centred priors.  ``truth`` holds the
    generating parameters used by ``synth``.
    """

    schema: TraitSchema
    covariate_names: tuple[str, ...]
    class_map: CovarianceClassMap
    design: Design
    formula: str
    categories: tuple[str, ...]
    pi: np.ndarray
    priors: tuple[CategoryPrior, ...] | None
    chain: ChainConfig
    classifier: ClassifierConfig
    seed: int
    truth: tuple[CategoryParams, ...] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.categories)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {"seed", "traits", "covariates", "design", "classes", "categories", "priors",
                 "chain", "classifier", "truth", "synth"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            traits = d["traits"]
            schema = TraitSchema(tuple(t["name"] for t in traits),
                                 tuple(_kind_from_dict(t) for t in traits))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"traits: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"traits: {exc}") from None
        covs = tuple(d.get("covariates") or ())
        formula = str(d.get("design", "+".join(covs)))
        try:
            design = Design.parse(covs, formula)
            rules = tuple(ClassRule(str(c["name"]), dict(c.get("when") or {}))
                          for c in (d.get("classes") or [{"name": "all"}]))
            class_map = CovarianceClassMap(covs, rules)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"covariates: {exc}") from None
        cats = tuple(str(c) for c in d.get("categories") or ())
        if len(cats) < 1 or len(set(cats)) != len(cats):
            raise ConfigError("categories: need at least one, all distinct")
        q, k = schema.q, design.p + 1
        pd = dict(d.get("priors") or {})
        pi_raw = pd.get("pi", "uniform")
        if pi_raw == "uniform":
            pi = np.full(len(cats), 1.0 / len(cats))
        else:
            pi = np.asarray(pi_raw, dtype=float)
            if pi.shape != (len(cats),) or np.any(pi < 0) or pi.sum() <= 0:
                raise ConfigError("priors.pi: need one non-negative value per category")
            pi = pi / pi.sum()
        priors = None
        if "B0" in pd:
            try:
                nu0 = float(pd.get("nu0", 10))
                V0 = _matrix(pd["V0"], (q, q), "priors.V0")
                SigmaB = _matrix(pd["SigmaB"], (k, k), "priors.SigmaB")
                B0 = pd["B0"]
                if set(B0) != set(cats):
                    raise ConfigError("priors.B0: need one matrix per category")
                priors = tuple(CategoryPrior(_matrix(B0[c], (k, q), f"priors.B0.{c}"), SigmaB,
                                             nu0, V0) for c in cats)
            except KeyError as exc:
                raise ConfigError(f"priors: missing {exc}") from None
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"priors: {exc}") from None
        seed = int(d["seed"]) if d.get("seed") is not None else default_seed()
        try:
            cd = dict(d.get("chain") or {})
            chain = ChainConfig(int(cd.get("iterations", 4000)), int(cd.get("burn_in", 1000)),
                                int(cd.get("thin", 1)), seed,
                                max_proposals=int(cd.get("max_proposals", 1000)),
                                gibbs_sweeps=int(cd.get("gibbs_sweeps", 10)))
            kd = dict(d.get("classifier") or {})
            classifier = ClassifierConfig(
                rho=float(kd.get("rho", 0.1)), tau=float(kd.get("tau", 0.001)),
                estimator=str(kd.get("estimator", "auto")),
                T=None if kd.get("T") is None else int(kd["T"]),
                n_aug=int(kd.get("n_aug", 1)), n_ref=int(kd.get("n_ref", 4000)),
                max_draws=None if kd.get("max_draws") is None else int(kd["max_draws"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        truth = None
        if d.get("truth") is not None:
            td = d["truth"]
            if set(td) != set(cats):
                raise ConfigError("truth: need parameters for every category")
            try:
                truth = tuple(CategoryParams(
                    _matrix(td[c]["B"], (k, q), f"truth.{c}.B"),
                    _matrix(td[c]["Sigmas"], (class_map.A, q, q), f"truth.{c}.Sigmas"))
                    for c in cats)
            except KeyError as exc:
                raise ConfigError(f"truth: missing {exc}") from None
            for c, t in zip(cats, truth):
                for a, S in enumerate(t.Sigmas):
                    if not np.allclose(S, S.T) or np.any(np.linalg.eigvalsh(S) <= 0):
                        raise ConfigError(f"truth.{c}.Sigmas[{a}] is not SPD")
        extra = {"synth": d["synth"]} if "synth" in d else {}
        return cls(schema, covs, class_map, design, formula, cats, pi, priors, chain,
                   classifier, seed, truth, extra)

    def to_dict(self) -> dict:
        """Resolved config; ``RunConfig.from_dict(c.to_dict())`` reproduces ``c``."""
        d: dict[str, Any] = {
            "seed": self.seed,
            "traits": [_kind_to_dict(n, k) for n, k in zip(self.schema.names,
                                                           self.schema.kinds)],
            "covariates": list(self.covariate_names),
            "design": self.formula,
            "classes": [{"name": r.name, "when": {k: (list(v) if isinstance(v, tuple) else v)
                                                  for k, v in r.when.items()}}
                        for r in self.class_map.rules],
            "categories": list(self.categories),
            "priors": {"pi": self.pi.tolist()},
            "chain": {"iterations": self.chain.iterations, "burn_in": self.chain.burn_in,
                      "thin": self.chain.thin, "max_proposals": self.chain.max_proposals,
                      "gibbs_sweeps": self.chain.gibbs_sweeps},
            "classifier": {"rho": self.classifier.rho, "tau": self.classifier.tau,
                           "estimator": self.classifier.estimator, "T": self.classifier.T,
                           "n_aug": self.classifier.n_aug, "n_ref": self.classifier.n_ref,
                           "max_draws": self.classifier.max_draws},
        }
        if self.priors is not None:
            p0 = self.priors[0]
            d["priors"].update({"nu0": p0.nu0, "V0": p0.V0.tolist(),
                                "SigmaB": p0.SigmaB.tolist(),
                                "B0": {c: p.B0.tolist() for c, p in zip(self.categories,
                                                                        self.priors)}})
        if self.truth is not None:
            d["truth"] = {c: {"B": t.B.tolist(), "Sigmas": t.Sigmas.tolist()}
                          for c, t in zip(self.categories, self.truth)}
        d.update(self.extra)
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, chain=replace(self.chain, seed=seed))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

_INTERVAL = re.compile(r"^\(\s*([^,]+?)\s*,\s*([^\]]+?)\s*\]$")


def _number(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "+inf"):
        return math.inf
    if t == "-inf":
        return -math.inf
    return float(t)


def parse_cell(text: str, kind: TraitKind) -> TraitCell:
    """Parse one trait entry: ``NA``, ``(c,d]`` or a recorded value."""
    t = text.strip()
    if t in ("NA", ""):
        return MISSING
    m = _INTERVAL.match(t)
    if m:
        return Interval(_number(m.group(1)), _number(m.group(2)))
    v = float(t)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {t!r}")
    return cell_from_raw(v, kind)


def format_cell(lo: float, hi: float, kind: TraitKind) -> str:
    """Inverse of :func:`parse_cell` for cells produced by the schema."""
    if lo == hi:
        return repr(float(lo))
    if math.isinf(lo) and math.isinf(hi):
        return "NA"
    try:
        cell = Interval(lo, hi)
        if isinstance(kind, OrderedCategorical):
            z = (lo + hi) / 2 if cell.bounded else None
            if z is not None and float(z).is_integer() and 0 <= z <= kind.categories - 1 \
                    and cell_from_raw(z, kind) == cell:
                return str(int(z))
            for code in (0, kind.categories - 1):
                if cell_from_raw(code, kind) == cell:
                    return str(code)
        elif kind.half_width > 0 and cell.bounded and \
                math.isclose(hi - lo, 2 * kind.half_width, rel_tol=0, abs_tol=1e-12):
            z = (lo + hi) / 2
            if cell_from_raw(z, kind) == cell:
                return repr(float(z))
    except ValueError:
        pass

    def num(v):
        return "inf" if v == math.inf else "-inf" if v == -math.inf else repr(float(v))
    return f"({num(lo)},{num(hi)}]"


def read_rows(path, schema: TraitSchema, covariate_names: Sequence[str],
              categories: Sequence[str] | None = None, require_label: bool = True):
    """Parse a CSV into covariates, cell bounds and (optional) 0-based labels.

    Category labels may be given as 1-based indices or category names.
    Errors name the offending data row (the header is row 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = list(reader)
    known = {"category", *covariate_names, *schema.names}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise DataError(f"{path}: unknown column(s) {unknown}")
    need = list(covariate_names) + list(schema.names)
    if require_label:
        need.insert(0, "category")
    absent = [h for h in need if h not in header]
    if absent:
        raise DataError(f"{path}: missing column(s) {absent}")
    col = {h: j for j, h in enumerate(header)}
    n = len(rows)
    cov = np.empty((n, len(covariate_names)))
    lo = np.empty((n, schema.q))
    hi = np.empty((n, schema.q))
    labels = np.full(n, -1, dtype=np.intp)
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line}: {len(row)} fields, header has {len(header)}")
        for j, name in enumerate(covariate_names):
            try:
                cov[r, j] = float(row[col[name]])
            except ValueError:
                raise DataError(f"{path}: row {line}: covariate {name!r} is not numeric: "
                                f"{row[col[name]]!r}") from None
        cells = []
        for name, kind in zip(schema.names, schema.kinds):
            try:
                cells.append(parse_cell(row[col[name]], kind))
            except ValueError as exc:
                raise DataError(f"{path}: row {line}: trait {name!r}: malformed cell "
                                f"{row[col[name]]!r} ({exc})") from None
        lo[r], hi[r] = cells_to_bounds(cells)
        if "category" in col and row[col["category"]].strip() != "":
            raw = row[col["category"]].strip()
            labels[r] = _label(raw, categories, path, line)
        elif require_label:
            raise DataError(f"{path}: row {line}: empty category")
    return cov, lo, hi, labels


def _label(raw: str, categories, path, line) -> int:
    N = len(categories) if categories is not None else None
    if categories is not None and raw in categories:
        return list(categories).index(raw)
    try:
        v = int(raw)
    except ValueError:
        raise DataError(f"{path}: row {line}: unknown category {raw!r}") from None
    if N is not None and not 1 <= v <= N:
        raise DataError(f"{path}: row {line}: category {v} outside 1..{N}")
    return v - 1


def ingest_csv(path, config: RunConfig) -> Dataset:
    """Read labelled training data into a :class:`Dataset`."""
    cov, lo, hi, labels = read_rows(path, config.schema, config.covariate_names,
                                    config.categories)
    return Dataset(config.schema, config.covariate_names, config.class_map, config.categories,
                   cov, lo, hi, labels)


def _fmt_number(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_dataset_csv(fh, dataset: Dataset) -> None:
    """Write a dataset in the format read by :func:`ingest_csv` (1-based labels)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["category", *dataset.covariate_names, *dataset.schema.names])
    for j in range(dataset.n):
        w.writerow([int(dataset.labels[j]) + 1,
                    *(_fmt_number(v) for v in dataset.covariates[j]),
                    *(format_cell(dataset.lo[j, k], dataset.hi[j, k], dataset.schema.kinds[k])
                      for k in range(dataset.schema.q))])


def dataset_csv_text(dataset: Dataset) -> str:
    buf = io.StringIO()
    write_dataset_csv(buf, dataset)
    return buf.getvalue()
