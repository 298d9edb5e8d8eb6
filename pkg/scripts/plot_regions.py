"""Render a ``fuzzyda regions`` CSV as a decision-region figure.

Each cell is drawn as a rectangle coloured by its decision set; cells with
more than one category are hatched.  One panel is drawn per covariate vector.

Usage::

    python scripts/plot_regions.py regions.csv -o regions.png
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np


def read_regions(path):
    """Return ``(echo, header, rows)`` from a regions CSV."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# fuzzyda regions "):
            raise SystemExit(f"{path}: not a fuzzyda regions file")
        echo = json.loads(first[len("# fuzzyda regions "):])
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    return echo, header, rows


def _finite(lo, hi, span):
    # half-infinite end bins are drawn one unit wide
    if not np.isfinite(lo):
        lo = hi - span
    if not np.isfinite(hi):
        hi = lo + span
    return lo, hi


def plot(path, output, dpi=150):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Patch, Rectangle

    echo, header, rows = read_regions(path)
    traits = echo["traits"]
    if len(traits) not in (1, 2):
        raise SystemExit("only one or two displayed traits can be drawn")
    covs = echo["config"]["covariates"]
    ncov = len(covs)
    col = {name: j for j, name in enumerate(header)}
    decisions = sorted({r[col["decision"]] for r in rows})
    singles = [d for d in decisions if "|" not in d and d != "-"]
    cmap = plt.get_cmap("tab10")
    colour = {d: cmap(j % 10) for j, d in enumerate(singles)}
    colour["-"] = (1.0, 1.0, 1.0, 1.0)

    panels = sorted({tuple(r[:ncov]) for r in rows})
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4.5), squeeze=False)
    for ax, key in zip(axes[0], panels):
        sub = [r for r in rows if tuple(r[:ncov]) == key]
        for r in sub:
            x0, x1 = _finite(float(r[col[f"{traits[0]}_lo"]]), float(r[col[f"{traits[0]}_hi"]]), 1.0)
            if len(traits) == 2:
                y0, y1 = _finite(float(r[col[f"{traits[1]}_lo"]]),
                                 float(r[col[f"{traits[1]}_hi"]]), 1.0)
            else:
                y0, y1 = 0.0, 1.0
            d = r[col["decision"]]
            members = d.split("|")
            face = colour.get(d, colour.get(members[0], (0.8, 0.8, 0.8, 1.0)))
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, facecolor=face,
                                   edgecolor=(0.2, 0.2, 0.2, 0.6), linewidth=0,
                                   hatch="///" if len(members) > 1 else None))
        ax.autoscale_view()
        ax.set_xlabel(traits[0])
        ax.set_ylabel(traits[1] if len(traits) == 2 else "")
        ax.set_title(", ".join(f"{c}={v}" for c, v in zip(covs, key)) or "all")
    handles = [Patch(facecolor=colour[d], label=d) for d in singles]
    handles.append(Patch(facecolor="white", hatch="///", edgecolor="grey", label="several"))
    if "-" in decisions:
        handles.append(Patch(facecolor="white", edgecolor="grey", label="none"))
    fig.legend(handles=handles, loc="lower center", ncol=min(len(handles), 6))
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    fig.savefig(output, dpi=dpi)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("regions")
    ap.add_argument("-o", "--output", default="regions.png")
    ap.add_argument("--dpi", type=int, default=150)
    args = ap.parse_args(argv)
    plot(args.regions, args.output, args.dpi)
    return 0


if __name__ == "__main__":
    sys.exit(main())
