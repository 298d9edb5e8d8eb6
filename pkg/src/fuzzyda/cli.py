"""Command-line interface: ``fuzzyda <command> ...``.

Commands
--------
synth     simulate a labelled dataset from the config's ``truth`` parameters
fit       run the Gibbs sampler per category and write a chain file
classify  classify rows of a CSV against a chain file (JSON lines out)
regions   decision regions over a grid of trait cells (CSV out)
simulate  simulated error and indecision rates, optionally a rho search (CSV out)
cv        cross-validated reward of covariate scenarios (JSON out)
select    forward trait selection per covariate scenario (JSON out)

Exit status: 0 success, 1 invalid input or configuration, 3 some rows were
unclassifiable, 4 some rows were flagged as outliers.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from .classify import ClassifierConfig, FittedModel, UnclassifiableError
from .config import (ConfigError, DataError, RunConfig, ingest_csv, load_config,
                     read_rows, write_dataset_csv)
from .evaluate import (CV_CHAIN, ModelSpec, cross_validate, decision_region_grid,
                       default_priors, error_sweep, forward_selection, rho_search, trait_cells)
from .gibbs import bayes_estimate, fit_all, load_chains, quantile_intervals, save_chains
from .model import Dataset, Design
from .samplers import SamplerError, rng_stream

EXIT_OK, EXIT_INVALID, EXIT_UNCLASSIFIABLE, EXIT_OUTLIER = 0, 1, 3, 4

# stream ids, one per consumer of randomness
_STREAM_SYNTH, _STREAM_CLASSIFY, _STREAM_REGIONS, _STREAM_SIMULATE = 101, 102, 103, 104


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _g6(v: float) -> str:
    return f"{v:.6g}"


@contextlib.contextmanager
def _output(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# Config / model resolution
# ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def load_model(path: str) -> tuple[FittedModel, RunConfig, dict]:
    chains, meta = load_chains(path)
    if "config" not in meta:
        raise ConfigError(f"{path}: chain file carries no config")
    cfg = RunConfig.from_dict(meta["config"])
    model = FittedModel(cfg.schema, cfg.class_map, cfg.design, cfg.categories, chains, cfg.pi)
    return model, cfg, meta


def _parse_subset(text: str | None, categories: Sequence[str]) -> tuple[int, ...] | None:
    if not text:
        return None
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in categories:
            out.append(list(categories).index(tok))
            continue
        try:
            v = int(tok)
        except ValueError:
            raise ConfigError(f"--subset: unknown category {tok!r}") from None
        if not 1 <= v <= len(categories):
            raise ConfigError(f"--subset: category {v} outside 1..{len(categories)}")
        out.append(v - 1)
    return tuple(sorted(set(out)))


def _classifier(args, cfg: RunConfig) -> ClassifierConfig:
    c = cfg.classifier
    active = _parse_subset(getattr(args, "subset", None), cfg.categories)
    pi = None
    prior = getattr(args, "prior", None)
    if prior == "uniform":
        pi = tuple(np.full(cfg.N, 1.0 / cfg.N))
    elif prior not in (None, "config"):
        vals = [float(v) for v in prior.split(",")]
        if len(vals) != cfg.N:
            raise ConfigError(f"--prior: need {cfg.N} values")
        pi = tuple(vals)
    upd = {"active": active, "pi": pi}
    for name in ("rho", "tau", "estimator", "T", "n_ref", "max_draws", "n_aug"):
        v = getattr(args, name, None)
        if v is not None and not isinstance(v, list):
            upd[name] = v
    try:
        return replace(c, **upd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _classifier_echo(c: ClassifierConfig, seed: int) -> dict:
    return {"rho": c.rho, "tau": c.tau, "pi": None if c.pi is None else list(c.pi),
            "active": None if c.active is None else [i + 1 for i in c.active],
            "estimator": c.estimator, "T": c.T, "n_aug": c.n_aug, "n_ref": c.n_ref,
            "max_draws": c.max_draws, "seed": seed}


def _parse_x(items: Sequence[str] | None, cfg: RunConfig) -> list[tuple[float, ...]]:
    """``--x age=0,season=1`` (repeatable) to covariate tuples in config order."""
    names = cfg.covariate_names
    if not items:
        if names:
            raise ConfigError(f"--x is required (covariates: {', '.join(names)})")
        return [()]
    out = []
    for item in items:
        vals = {}
        for part in filter(None, item.split(",")):
            if "=" not in part:
                raise ConfigError(f"--x {item!r}: expected name=value pairs")
            k, v = part.split("=", 1)
            if k.strip() not in names:
                raise ConfigError(f"--x: unknown covariate {k.strip()!r}")
            vals[k.strip()] = float(v)
        missing = [n for n in names if n not in vals]
        if missing:
            raise ConfigError(f"--x {item!r}: missing covariates {missing}")
        out.append(tuple(vals[n] for n in names))
    return out


def _comment(fh, command: str, echo: dict) -> None:
    fh.write(f"# fuzzyda {command} {_dump(echo)}\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    if cfg.truth is None:
        raise ConfigError("synth needs a 'truth' section in the config")
    spec = dict(cfg.extra.get("synth") or {})
    n = args.n if args.n is not None else spec.get("n", 50)
    counts = [int(n)] * cfg.N if np.isscalar(n) else [int(v) for v in n]
    if len(counts) != cfg.N:
        raise ConfigError("synth.n: one count per category")
    levels = spec.get("covariates") or {}
    for name in cfg.covariate_names:
        if name not in levels:
            raise ConfigError(f"synth.covariates: no levels for {name!r}")
    missing = float(args.missing if args.missing is not None else spec.get("missing", 0.0))
    rng = rng_stream(cfg.seed, _STREAM_SYNTH)
    cov, lo, hi, labels = [], [], [], []
    for i, (n_i, theta) in enumerate(zip(counts, cfg.truth)):
        x = np.column_stack([rng.choice(np.asarray(levels[nm], float), size=n_i)
                             for nm in cfg.covariate_names]) if cfg.covariate_names \
            else np.zeros((n_i, 0))
        X = cfg.design.matrix(x)
        a = cfg.class_map.classes(x)
        y = np.empty((n_i, cfg.schema.q))
        for j in range(n_i):
            y[j] = rng.multivariate_normal(X[j] @ theta.B, theta.Sigmas[a[j]])
        l, h = cfg.schema.obfuscate(y)
        if missing > 0:
            drop = rng.random(l.shape) < missing
            l[drop], h[drop] = -np.inf, np.inf
        cov.append(x)
        lo.append(l)
        hi.append(h)
        labels.append(np.full(n_i, i))
    data = Dataset(cfg.schema, cfg.covariate_names, cfg.class_map, cfg.categories,
                   np.concatenate(cov), np.concatenate(lo), np.concatenate(hi),
                   np.concatenate(labels))
    with _output(args.output) as fh:
        write_dataset_csv(fh, data)
    return EXIT_OK


def _print_summary(cfg: RunConfig, chains, out) -> None:
    rows = cfg.design.column_names
    for name, chain in zip(cfg.categories, chains):
        est = bayes_estimate(chain)
        out.write(f"\n== {name}: {len(chain)} retained draws\n")
        out.write("Bayes estimate of B\n")
        out.write(" " * 14 + "".join(f"{t:>12s}" for t in cfg.schema.names) + "\n")
        for m, r in enumerate(rows):
            out.write(f"{r:>14s}" + "".join(f"{v:12.4f}" for v in est.B[m]) + "\n")
        for a, cls in enumerate(cfg.class_map.class_names):
            out.write(f"Sigma[{cls}]\n")
            for k in range(cfg.schema.q):
                out.write(" " * 14 + "".join(f"{v:12.4f}" for v in est.Sigmas[a, k]) + "\n")
        qi = quantile_intervals(chain, row_names=rows, trait_names=cfg.schema.names,
                                class_names=cfg.class_map.class_names)
        out.write(f"{'parameter':<40s}{'2.5%':>12s}{'50%':>12s}{'97.5%':>12s}\n")
        for key, v in qi.items():
            out.write(f"{key:<40s}" + "".join(f"{x:12.4f}" for x in v) + "\n")


def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    if args.iterations is not None or args.burn_in is not None:
        cfg = replace(cfg, chain=replace(
            cfg.chain, iterations=args.iterations or cfg.chain.iterations,
            burn_in=cfg.chain.burn_in if args.burn_in is None else args.burn_in))
    data = ingest_csv(args.data, cfg)
    priors = cfg.priors
    if priors is None:
        priors = tuple(default_priors(data, cfg.design))
        cfg = replace(cfg, priors=priors)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    chains = fit_all(data, priors, cfg.chain, cfg.design, workers)
    meta = {"config": cfg.to_dict(), "data_sha256": _file_digest(args.data),
            "counts": data.counts().tolist()}
    save_chains(args.output, chains, meta)
    if not args.quiet:
        _print_summary(cfg, chains, sys.stdout)
    return EXIT_OK


def cmd_classify(args) -> int:
    model, cfg, meta = load_model(args.model)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    config = _classifier(args, cfg)
    cov, lo, hi, labels = read_rows(args.input, cfg.schema, cfg.covariate_names, cfg.categories,
                                    require_label=False)
    rng = rng_stream(cfg.seed, _STREAM_CLASSIFY)
    echo = _classifier_echo(config, cfg.seed)
    echo["model_sha256"] = _file_digest(args.model)
    status = EXIT_OK
    outliers = unclassifiable = 0
    with _output(args.output) as fh:
        for j in range(len(cov)):
            rec = {"row": j + 2,
                   "x": dict(zip(cfg.covariate_names, cov[j].tolist())),
                   "label": None if labels[j] < 0 else cfg.categories[labels[j]]}
            try:
                rep = model.classify((cov[j], lo[j], hi[j]), config, rng)
                rec.update(rep.to_record(cfg.categories))
                rec["unclassifiable"] = False
                outliers += rep.outlier
            except UnclassifiableError as exc:
                rec.update({"chosen": [], "outlier": False, "unclassifiable": True,
                            "message": str(exc)})
                unclassifiable += 1
            rec["config"] = echo
            fh.write(_dump(rec) + "\n")
    if outliers:
        status = EXIT_OUTLIER
    elif unclassifiable:
        status = EXIT_UNCLASSIFIABLE
    print(f"classified {len(cov)} rows: {outliers} outlier(s), "
          f"{unclassifiable} unclassifiable", file=sys.stderr)
    return status


def _parse_ranges(items: Sequence[str] | None) -> dict[str, tuple[float, float]]:
    out = {}
    for item in items or []:
        try:
            name, span = item.split("=", 1)
            a, b = span.split(":", 1)
            out[name.strip()] = (float(a), float(b))
        except ValueError:
            raise ConfigError(f"--range {item!r}: expected name=start:stop") from None
    return out


def cmd_regions(args) -> int:
    model, cfg, _ = load_model(args.model)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    config = _classifier(args, cfg)
    xs = _parse_x(args.x, cfg)
    names = [t.strip() for t in args.traits.split(",")]
    try:
        displayed = [cfg.schema.index(t) for t in names]
    except KeyError as exc:
        raise ConfigError(f"--traits: {exc}") from None
    ranges = _parse_ranges(args.range)
    grids = []
    for name, k in zip(names, displayed):
        start, stop = ranges.get(name, (None, None))
        grids.append(trait_cells(cfg.schema.kinds[k], start, stop))
    echo = {"config": cfg.to_dict(), "classifier": _classifier_echo(config, cfg.seed),
            "traits": names, "ranges": {k: list(v) for k, v in sorted(ranges.items())}}
    rng = rng_stream(cfg.seed, _STREAM_REGIONS)
    with _output(args.output) as fh:
        _comment(fh, "regions", echo)
        header = list(cfg.covariate_names)
        for n in names:
            header += [f"{n}_lo", f"{n}_hi"]
        header += ["decision"] + [f"p_{c}" for c in cfg.categories]
        if config.tau > 0:
            header += [f"omega_bar_{c}" for c in cfg.categories]
        fh.write(",".join(header) + "\n")
        for x in xs:
            for cell in decision_region_grid(model, x, displayed, grids, config, rng):
                row = [f"{v:g}" for v in x]
                for lo, hi in zip(cell.lo, cell.hi):
                    row += [repr(float(lo)), repr(float(hi))]
                row.append("|".join(cfg.categories[i] for i in cell.decision) or "-")
                row += [_g6(p) for p in cell.p_hat]
                if cell.omega_bar is not None:
                    row += [_g6(w) for w in cell.omega_bar]
                fh.write(",".join(row) + "\n")
    return EXIT_OK


def _float_list(text: str | None) -> list[float] | None:
    if text is None:
        return None
    return [float(v) for v in text.split(",")]


def cmd_simulate(args) -> int:
    model, cfg, _ = load_model(args.model)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    config = _classifier(args, cfg)
    xs = _parse_x(args.x, cfg)
    rhos = _float_list(args.rhos) or [config.rho]
    taus = _float_list(args.taus) or [config.tau]
    config = replace(config, tau=max(taus) if args.psi is None else config.tau)
    rng = rng_stream(cfg.seed, _STREAM_SIMULATE)
    echo = {"config": cfg.to_dict(), "classifier": _classifier_echo(config, cfg.seed),
            "n_sim": args.n_sim, "plug_in": args.plug_in}
    with _output(args.output) as fh:
        _comment(fh, "simulate", echo)
        if args.psi is not None:
            res = rho_search(model, xs, args.psi, config, args.n_sim, rng, args.plug_in)
            fh.write("psi,rho,error,feasible\n")
            fh.write(f"{args.psi:g},{_g6(res.rho)},{_g6(res.error)},{int(res.feasible)}\n")
            return EXIT_OK
        reports = error_sweep(model, xs, config, args.n_sim, rng, rhos, taus, args.plug_in)
        cols = list(reports[0].row().keys())
        fh.write(",".join(cols) + "\n")
        for r in reports:
            row = r.row()
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    return EXIT_OK


def _scenarios(args, cfg: RunConfig) -> dict[str, Design]:
    formulas = [s.strip() for s in args.scenarios.split(",")] if args.scenarios \
        else [cfg.formula]
    out = {}
    for f in formulas:
        try:
            out[f or "1"] = Design.parse(cfg.covariate_names, f)
        except ValueError as exc:
            raise ConfigError(f"--scenarios: {exc}") from None
    return out


def _cv_setup(args):
    cfg = _resolve_config(args)
    data = ingest_csv(args.data, cfg)
    chain = replace(CV_CHAIN, seed=cfg.seed,
                    iterations=args.iterations or CV_CHAIN.iterations,
                    burn_in=CV_CHAIN.burn_in if args.burn_in is None else args.burn_in)
    classifier = replace(cfg.classifier, rho=args.rho, tau=args.tau)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    echo = {"config": cfg.to_dict(), "folds": args.folds, "weights": args.weights,
            "rho": args.rho, "tau": args.tau,
            "chain": {"iterations": chain.iterations, "burn_in": chain.burn_in},
            "data_sha256": _file_digest(args.data)}
    return cfg, data, chain, classifier, workers, echo


def cmd_cv(args) -> int:
    cfg, data, chain, classifier, workers, echo = _cv_setup(args)
    traits = tuple(range(cfg.schema.q))
    if args.traits:
        traits = tuple(cfg.schema.index(t.strip()) for t in args.traits.split(","))
    specs = [ModelSpec(name, traits, design) for name, design in _scenarios(args, cfg).items()]
    res = cross_validate(data, args.folds, specs, chain, classifier, args.weights, cfg.seed,
                         pi=cfg.pi, workers=workers)
    out = {"command": "cv", **res.record(), "echo": echo}
    with _output(args.output) as fh:
        fh.write(json.dumps(out, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg, data, chain, classifier, workers, echo = _cv_setup(args)
    res = forward_selection(data, _scenarios(args, cfg), args.folds, chain, classifier,
                            args.weights, cfg.seed, pi=cfg.pi, max_traits=args.max_traits,
                            workers=workers)
    out = {"command": "select", **res.record(cfg.schema.names), "echo": echo}
    with _output(args.output) as fh:
        fh.write(json.dumps(out, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_classifier_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, help="inclusion threshold in [0, 1]")
    p.add_argument("--tau", type=float, help="outlier cutoff in [0, 1)")
    p.add_argument("--prior", help="'uniform', 'config' or comma-separated category priors")
    p.add_argument("--subset", help="active categories (1-based indices or names)")
    p.add_argument("--estimator", choices=["auto", "exact", "indicator", "grid", "unilik"])
    p.add_argument("-T", type=int, dest="T", help="grid points for the grid estimator")
    p.add_argument("--n-ref", type=int, dest="n_ref", help="reference draws per p-value")
    p.add_argument("--max-draws", type=int, dest="max_draws",
                   help="thin each chain to this many draws when scoring")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuzzyda", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate a dataset from the config's truth")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--n", type=int, help="observations per category")
    p.add_argument("--missing", type=float, help="fraction of trait cells made missing")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit one chain per category")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-d", "--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-q", "--quiet", action="store_true", help="skip the summary tables")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="classify CSV rows")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output")
    _add_classifier_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("regions", help="decision regions on a grid of cells")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("--traits", required=True, help="displayed traits, comma-separated")
    p.add_argument("--range", action="append", help="name=start:stop for continuous traits")
    p.add_argument("--x", action="append", help="covariates, e.g. age=0 (repeatable)")
    p.add_argument("-o", "--output")
    _add_classifier_flags(p)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("simulate", help="simulated error rates")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("--n-sim", type=int, dest="n_sim", default=100_000)
    p.add_argument("--x", action="append", help="covariates, e.g. age=0 (repeatable)")
    p.add_argument("--rhos", help="comma-separated rho values (common random numbers)")
    p.add_argument("--taus", help="comma-separated tau values (common random numbers)")
    p.add_argument("--plug-in", action="store_true", dest="plug_in",
                   help="use the Bayes estimate instead of the full posterior")
    p.add_argument("--psi", type=float, help="search the largest rho with error <= psi %%")
    p.add_argument("-o", "--output")
    _add_classifier_flags(p)
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("cv", cmd_cv, "cross-validate covariate scenarios"),
                                 ("select", cmd_select, "forward trait selection")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("-c", "--config", required=True)
        p.add_argument("-d", "--data", required=True)
        p.add_argument("--folds", type=int, default=10)
        p.add_argument("--scenarios", help="comma-separated design formulas, e.g. age,age*season")
        p.add_argument("--weights", choices=["uniform", "proportional"], default="uniform")
        p.add_argument("--rho", type=float, default=1.0)
        p.add_argument("--tau", type=float, default=0.0)
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("-o", "--output")
        if name == "cv":
            p.add_argument("--traits", help="trait subset, comma-separated")
        else:
            p.add_argument("--max-traits", type=int, dest="max_traits")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, SamplerError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"fuzzyda {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
